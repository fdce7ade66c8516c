// Acceptance gate for the episodic learning harness. Eight independent
// checks, one verdict line each on stdout, exit code = number of failures.
// Training progress goes to stderr so the verdict block stays clean.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msl/checkpoint.hpp"
#include "msl/digest.hpp"
#include "msl/episode.hpp"
#include "msl/model.hpp"
#include "msl/rng.hpp"
#include "msl/run_config.hpp"
#include "msl/synthetic.hpp"
#include "msl/tensor.hpp"
#include "msl/trainer.hpp"

namespace fs = std::filesystem;
using namespace msl;

namespace {

// ===== plumbing =====

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

TrainHooks progress_hooks(const std::string& tag) {
  TrainHooks hooks;
  hooks.on_metrics = [tag](const MetricsRecord& rec) {
    std::cerr << "  [" << tag << "] step " << rec.step << " loss " << fmt(rec.mean_loss)
              << " exact " << fmt(rec.exact_match_accuracy) << "\n";
  };
  return hooks;
}

std::vector<Episode> make_episodes(const EpisodeGenConfig& gen, uint64_t seed_base,
                                   int64_t count) {
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    out.push_back(generate_episode(gen, Rng::mix(seed_base, static_cast<uint64_t>(i))));
  }
  return out;
}

// ===== criterion 1: numerical core =====
// Full-model gradient check at d_model 64, 2 layers, 12-token stream.
// Every parameter tensor participates; coordinates are subsampled with a
// seeded permutation so the check fits the 2-minute budget (a full sweep of
// ~70k coordinates needs two forward passes each and cannot).

Verdict criterion_numerical_core() {
  const auto t0 = std::chrono::steady_clock::now();

  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = 20;
  config.max_seq_len = 12;

  const int64_t T = 12;
  Rng rng(0x67726164);
  EncodedEpisode enc;
  for (int64_t i = 0; i < T; ++i) {
    enc.items.push_back(StreamItem::of_token(rng.uniform_int(0, config.vocab_size - 1)));
    const bool masked = i >= 7;
    enc.loss_mask.push_back(masked ? 1 : 0);
    enc.supervision.push_back(masked ? rng.uniform_int(0, config.vocab_size - 1) : -1);
  }

  ModelParams params = init_params(config, 11);
  params.zero_grads();
  Tensor loss = episode_loss(params, config, enc);
  backward(loss);

  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, t] : params.by_name) {
    analytic[name] = t.has_grad() ? t.grad() : std::vector<double>(t.values().size(), 0.0);
  }

  const double eps = 1e-5;
  const int64_t per_tensor = 400;  // small tensors get a full sweep
  double max_rel = 0.0;
  int64_t checked = 0;
  std::string worst;
  NoGradGuard guard;
  for (auto& [name, t] : params.by_name) {
    auto& vals = t.mutable_values();
    const int64_t n = static_cast<int64_t>(vals.size());
    Rng coord_rng(Rng::mix(0x636f7264, fnv1a64(name)));
    std::vector<int64_t> order = coord_rng.permutation(n);
    const int64_t k = std::min(n, per_tensor);
    for (int64_t j = 0; j < k; ++j) {
      const size_t i = static_cast<size_t>(order[static_cast<size_t>(j)]);
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = episode_loss(params, config, enc).scalar();
      vals[i] = orig - eps;
      const double fm = episode_loss(params, config, enc).scalar();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[name][i];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      if (rel > max_rel) {
        max_rel = rel;
        worst = name;
      }
      ++checked;
    }
  }

  const double wall = seconds_since(t0);
  Verdict v;
  v.pass = max_rel < 1e-4 && wall < 120.0;
  v.detail = "max rel " + fmt(max_rel, 2) + " (worst: " + worst + ") over " +
             std::to_string(checked) + " coords in " + fmt(wall) + "s";
  return v;
}

// ===== criterion 2: systematic generalization =====
// Metalearner sees a fresh primitive->symbol assignment every episode and is
// scored on compositions of the held-out primitive. The control trains with
// one fixed assignment and faces fresh ones at eval.

Verdict criterion_systematic_generalization() {
  GrammarConfig grammar;  // stock grammar

  EpisodeGenConfig train_gen;
  train_gen.challenge = Challenge::sysgen;
  train_gen.grammar = grammar;

  EpisodeGenConfig eval_gen = train_gen;
  eval_gen.heldout_eval = true;

  EpisodeGenConfig control_gen = train_gen;
  control_gen.grammar.fixed_assignment_seed = 0xf1aed;

  const Vocab vocab = Vocab::for_sysgen(grammar);
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = vocab.size();
  config.max_seq_len = 160;

  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.batch_size = 4;
  opt.total_steps = 20000;
  opt.eval_every = 2000;
  opt.seed = 13;

  const std::vector<Episode> eval_eps = make_episodes(eval_gen, 0x5e7a1, 100);

  ModelParams learner = init_params(config, 12);
  meta_train(learner, config, EpisodeStream{train_gen, 11}, vocab, opt, {},
             progress_hooks("sysgen"));
  const double trained = evaluate_episodes(learner, config, vocab, eval_eps)
                             .exact_match_accuracy;

  ModelParams control = init_params(config, 12);
  meta_train(control, config, EpisodeStream{control_gen, 11}, vocab, opt, {},
             progress_hooks("sysgen control"));
  const double fixed = evaluate_episodes(control, config, vocab, eval_eps)
                           .exact_match_accuracy;

  Verdict v;
  v.pass = trained >= 0.9 && fixed <= 0.2;
  v.detail = "heldout exact match: metalearner " + fmt(trained) + " (need >= 0.9), fixed-assignment control " +
             fmt(fixed) + " (need <= 0.2)";
  return v;
}

// ===== criterion 3: continual-learning contrast =====

Verdict criterion_continual() {
  // (a) plain sequential SGD on the two task splits forgets task 1
  EpisodeGenConfig train_gen;
  train_gen.challenge = Challenge::continual;
  train_gen.bank = BankRef{Rng::mix(31, 0x626b7364), 60, 16, 0.1, 0, 40};

  EpisodeGenConfig eval_gen = train_gen;
  eval_gen.bank.class_lo = 40;
  eval_gen.bank.class_hi = 60;

  const std::vector<SyntheticClass> eval_bank = realize_bank_slice(eval_gen.bank);
  const std::vector<std::vector<SyntheticClass>> tasks = {
      {eval_bank[0], eval_bank[1]}, {eval_bank[2], eval_bank[3]}};
  BaselineConfig base_cfg;
  base_cfg.seed = 5;
  const SequentialBaselineResult base = baseline_sequential_sgd(tasks, base_cfg);
  const double drop = base.drop_fraction;

  // (b) the fixed-state metalearner holds both tasks at once
  const Vocab vocab = Vocab::for_config(train_gen);
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = vocab.size();
  config.max_seq_len = 96;
  config.attention_kind = AttentionKind::linear_fixed_state;
  config.vector_input_dim = 64;

  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.batch_size = 4;
  opt.total_steps = 6000;
  opt.eval_every = 1000;
  opt.seed = 33;

  ModelParams learner = init_params(config, 32);
  meta_train(learner, config, EpisodeStream{train_gen, 31}, vocab, opt, {},
             progress_hooks("continual"));
  const std::vector<Episode> eval_eps = make_episodes(eval_gen, 0xc0471, 100);
  const MetricsRecord rec = evaluate_episodes(learner, config, vocab, eval_eps);

  double per_task_min = 1.0;
  for (double a : rec.per_task_accuracy) per_task_min = std::min(per_task_min, a);
  const bool both_ok = rec.per_task_accuracy.size() == 2 && per_task_min >= 0.85;

  Verdict v;
  v.pass = drop > 0.5 && both_ok;
  std::string tasks_str;
  for (double a : rec.per_task_accuracy) tasks_str += (tasks_str.empty() ? "" : "/") + fmt(a);
  v.detail = "baseline task-1 drop " + fmt(drop) + " (need > 0.5); metalearner per-task " +
             tasks_str + " (need both >= 0.85)";
  return v;
}

// ===== criterion 4: fixed-state verification =====

Verdict criterion_fixed_state() {
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = 24;
  config.max_seq_len = 300;
  config.attention_kind = AttentionKind::linear_fixed_state;

  const int64_t T = 240;
  Rng rng(0x66697873);
  std::vector<StreamItem> items;
  for (int64_t i = 0; i < T; ++i) {
    items.push_back(StreamItem::of_token(rng.uniform_int(0, config.vocab_size - 1)));
  }

  const ModelParams params = init_params(config, 21);
  const int64_t want_numel = LinearAttentionState::zeros(config).total_numel();
  const size_t want_tensors = static_cast<size_t>(config.n_layers * config.n_heads);

  int64_t steps_seen = 0;
  bool state_constant = true;
  const auto watch = [&](const LinearAttentionState& st) {
    ++steps_seen;
    if (st.total_numel() != want_numel || st.s.size() != want_tensors ||
        st.z.size() != want_tensors) {
      state_constant = false;
      return;
    }
    for (const Tensor& s : st.s) {
      if (s.shape() != Shape{config.d_head(), config.d_head()}) state_constant = false;
    }
    for (const Tensor& z : st.z) {
      if (z.shape() != Shape{1, config.d_head()}) state_constant = false;
    }
  };

  NoGradGuard guard;
  const Tensor stepwise = forward_stepwise(params, config, items, {}, watch);
  const Tensor parallel = forward(params, config, items);

  double max_diff = 0.0;
  for (size_t i = 0; i < stepwise.values().size(); ++i) {
    max_diff = std::max(max_diff, std::abs(stepwise.values()[i] - parallel.values()[i]));
  }

  Verdict v;
  v.pass = state_constant && steps_seen == T && max_diff <= 1e-8;
  v.detail = "state " + std::to_string(want_numel) + " values at every one of " +
             std::to_string(steps_seen) + " steps; stepwise vs parallel max diff " +
             fmt(max_diff, 2) + " (need <= 1e-8)";
  return v;
}

// ===== criterion 5: few-shot learning =====

Verdict criterion_fewshot() {
  EpisodeGenConfig train_gen;
  train_gen.challenge = Challenge::fewshot;
  train_gen.fewshot = FewshotSpec{5, 1, 1};
  train_gen.bank = BankRef{Rng::mix(21, 0x626b7364), 60, 16, 0.1, 0, 40};

  EpisodeGenConfig eval_gen = train_gen;
  eval_gen.bank.class_lo = 40;
  eval_gen.bank.class_hi = 60;

  const Vocab vocab = Vocab::for_config(train_gen);
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = vocab.size();
  config.max_seq_len = 64;
  config.vector_input_dim = 64;

  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.batch_size = 4;
  opt.total_steps = 6000;
  opt.eval_every = 1000;
  opt.seed = 23;

  ModelParams learner = init_params(config, 22);
  meta_train(learner, config, EpisodeStream{train_gen, 21}, vocab, opt, {},
             progress_hooks("fewshot"));

  const std::vector<Episode> eval_eps = make_episodes(eval_gen, 0xfe107, 100);
  const double model_acc =
      evaluate_episodes(learner, config, vocab, eval_eps).exact_match_accuracy;

  // nearest-prototype reference on the same queries
  const std::vector<SyntheticClass> eval_bank = realize_bank_slice(eval_gen.bank);
  int64_t oracle_right = 0, oracle_total = 0;
  for (const Episode& ep : eval_eps) {
    for (size_t q = 0; q < ep.query.size(); ++q) {
      // rebuild this episode's class<->label binding from its demos
      std::map<std::string, int64_t> label_to_class;
      for (const auto& [in, out] : ep.demo) {
        label_to_class[out.tokens.at(0)] = nearest_prototype_oracle(in.vec, eval_bank);
      }
      const int64_t cls = nearest_prototype_oracle(ep.query[q].vec, eval_bank);
      const std::string& want = ep.target[q].tokens.at(0);
      auto it = label_to_class.find(want);
      if (it != label_to_class.end() && it->second == cls) ++oracle_right;
      ++oracle_total;
    }
  }
  const double oracle_acc = static_cast<double>(oracle_right) / oracle_total;

  // ablation: shuffled demo labels should pull the model to chance
  std::vector<Episode> shuffled;
  shuffled.reserve(eval_eps.size());
  for (size_t i = 0; i < eval_eps.size(); ++i) {
    shuffled.push_back(shuffle_demo_labels(eval_eps[i], Rng::mix(0xab1a7e, i)));
  }
  const double shuffled_acc =
      evaluate_episodes(learner, config, vocab, shuffled).exact_match_accuracy;

  Verdict v;
  const bool near_oracle = model_acc >= oracle_acc - 0.05;
  const bool over_chance = model_acc >= 0.6;
  const bool collapses = std::abs(shuffled_acc - 0.2) <= 0.05;
  v.pass = near_oracle && over_chance && collapses;
  v.detail = "model " + fmt(model_acc) + " vs oracle " + fmt(oracle_acc) +
             " (need >= oracle - 0.05 and >= 0.6); shuffled-label " + fmt(shuffled_acc) +
             " (need 0.2 +/- 0.05)";
  return v;
}

// ===== criterion 6: multi-step reasoning contrast =====

Verdict criterion_reasoning() {
  EpisodeGenConfig sp_gen;
  sp_gen.challenge = Challenge::reasoning;
  sp_gen.reasoning = ReasoningSpec{3, 3, 2, false, 1};

  EpisodeGenConfig ao_gen = sp_gen;
  ao_gen.reasoning.answer_only = true;

  const Vocab vocab = Vocab::for_reasoning();
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 4;
  config.d_model = 64;
  config.d_ff = 128;
  config.vocab_size = vocab.size();
  config.max_seq_len = 48;

  OptimizerConfig opt;  // one matched budget for both arms
  opt.learning_rate = 1e-3;
  opt.batch_size = 8;
  opt.total_steps = 4000;
  opt.eval_every = 1000;
  opt.seed = 43;

  ModelParams scratchpad = init_params(config, 42);
  meta_train(scratchpad, config, EpisodeStream{sp_gen, 41}, vocab, opt, {},
             progress_hooks("scratchpad"));
  ModelParams answer_only = init_params(config, 42);
  meta_train(answer_only, config, EpisodeStream{ao_gen, 41}, vocab, opt, {},
             progress_hooks("answer only"));

  const std::vector<Episode> sp_eval = make_episodes(sp_gen, 0x5c6a7, 200);
  const std::vector<Episode> ao_eval = make_episodes(ao_gen, 0x5c6a7, 200);

  const double sp_answer =
      evaluate_episodes(scratchpad, config, vocab, sp_eval).answer_accuracy;
  const double ao_answer =
      evaluate_episodes(answer_only, config, vocab, ao_eval).answer_accuracy;

  // validate every emitted scratchpad trace against column arithmetic
  int64_t trace_right = 0, trace_total = 0;
  NoGradGuard guard;
  for (const Episode& ep : sp_eval) {
    const EncodedEpisode enc = encode_episode(ep, vocab, config.max_seq_len);
    for (const auto& slot : enc.slots) {
      std::vector<StreamItem> prefix(enc.items.begin(),
                                     enc.items.begin() + slot.answer_start);
      const std::vector<int64_t> decoded =
          decode_greedy(scratchpad, config, std::move(prefix), slot.answer_len + 8,
                        vocab.end_of_target());

      // recompute the working from the query operands
      std::vector<int64_t> operands;
      int64_t cur = -1;
      for (const std::string& tok : ep.query[0].tokens) {
        if (tok == "+") {
          operands.push_back(cur);
          cur = -1;
        } else {
          cur = (cur < 0 ? 0 : cur * 10) + std::stoll(tok);
        }
      }
      operands.push_back(cur);
      std::vector<std::string> want_tokens = reasoning_trace(operands, 3);
      want_tokens.push_back("=");
      for (const std::string& d : reasoning_answer(operands)) want_tokens.push_back(d);

      std::vector<int64_t> want_ids;
      for (const std::string& tok : want_tokens) want_ids.push_back(vocab.id(tok));
      if (decoded == want_ids) ++trace_right;
      ++trace_total;
    }
  }
  const double trace_exact = static_cast<double>(trace_right) / trace_total;

  Verdict v;
  v.pass = sp_answer >= ao_answer + 0.15;
  v.detail = "final answer: scratchpad " + fmt(sp_answer) + " vs answer-only " +
             fmt(ao_answer) + " (need +0.15); oracle-validated trace-exact " +
             fmt(trace_exact) + " on " + std::to_string(trace_total) + " traces";
  return v;
}

// ===== criterion 7: episode/oracle consistency =====

Verdict criterion_audit() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Episode> all;
  all.reserve(10000);

  EpisodeGenConfig sysgen_gen;
  sysgen_gen.challenge = Challenge::sysgen;
  EpisodeGenConfig sysgen_held = sysgen_gen;
  sysgen_held.heldout_eval = true;

  EpisodeGenConfig fewshot_gen;
  fewshot_gen.challenge = Challenge::fewshot;
  fewshot_gen.bank = BankRef{Rng::mix(71, 0x626b7364), 60, 16, 0.1, 0, 40};
  EpisodeGenConfig fewshot_eval = fewshot_gen;
  fewshot_eval.bank.class_lo = 40;
  fewshot_eval.bank.class_hi = 60;

  EpisodeGenConfig continual_gen;
  continual_gen.challenge = Challenge::continual;
  continual_gen.bank = fewshot_gen.bank;
  EpisodeGenConfig continual_eval = continual_gen;
  continual_eval.bank.class_lo = 40;
  continual_eval.bank.class_hi = 60;

  EpisodeGenConfig reasoning_gen;
  reasoning_gen.challenge = Challenge::reasoning;
  EpisodeGenConfig reasoning_ao = reasoning_gen;
  reasoning_ao.reasoning.answer_only = true;

  const std::vector<std::pair<EpisodeGenConfig, uint64_t>> sources = {
      {sysgen_gen, 0xa1},   {sysgen_held, 0xa2},   {fewshot_gen, 0xa3},
      {fewshot_eval, 0xa4}, {continual_gen, 0xa5}, {continual_eval, 0xa6},
      {reasoning_gen, 0xa7}, {reasoning_ao, 0xa8}};
  for (const auto& [gen, tag] : sources) {
    for (int64_t i = 0; i < 1250; ++i) {
      all.push_back(generate_episode(gen, Rng::mix(tag, static_cast<uint64_t>(i))));
    }
  }

  // round-trip through the JSONL format so the audit sees what a file would hold
  const std::string path =
      (fs::temp_directory_path() / ("acceptance_audit_" + std::to_string(::getpid()) + ".jsonl"))
          .string();
  write_episodes(path, all);
  const std::vector<Episode> back = read_episodes(path);
  fs::remove(path);

  const AuditReport report = audit_episodes(back);

  Verdict v;
  v.pass = report.checked == 10000 && report.mismatches == 0;
  v.detail = "checked " + std::to_string(report.checked) + " episodes, " +
             std::to_string(report.mismatches) + " mismatches in " +
             fmt(seconds_since(t0)) + "s";
  if (!report.notes.empty()) v.detail += "; first: " + report.notes.front();
  return v;
}

// ===== criterion 8: reproducibility =====

int run_cli(const std::string& args, const std::string& out_dir) {
  const std::string cmd = "MSL_OUT_DIR=\"" + out_dir + "\" " + MSL_CLI_PATH + " " + args +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> metric_rows_no_wall(const std::string& csv_path) {
  std::ifstream in(csv_path);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const size_t cut = line.rfind(',');
    rows.push_back(cut == std::string::npos ? line : line.substr(0, cut));
  }
  return rows;
}

bool same_bytes(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return sa.str() == sb.str();
}

Verdict criterion_reproducibility() {
  const fs::path root =
      fs::temp_directory_path() / ("acceptance_repro_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string config_path = (root / "config.json").string();
  {
    std::ofstream f(config_path);
    f << R"({
  "challenge": "fewshot",
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 32, "d_ff": 64, "max_seq_len": 48},
  "optimizer": {"learning_rate": 0.001, "batch_size": 2, "total_steps": 150, "eval_every": 50},
  "seeds": {"data": 91, "init": 92, "train": 93},
  "out_dir": "unused",
  "checkpoint_every": 50,
  "n_eval_episodes": 10,
  "data": {"n_way": 2, "k_shot": 1, "n_query_per_class": 1,
           "bank": {"train_classes": 6, "eval_classes": 4, "noise_rate": 0.05}}
})";
  }

  const std::string dir_a = (root / "a").string(), dir_b = (root / "b").string();
  const int rc_a = run_cli("train --config \"" + config_path + "\"", dir_a);
  const int rc_b = run_cli("train --config \"" + config_path + "\"", dir_b);

  Verdict v;
  if (rc_a != 0 || rc_b != 0) {
    v.detail = "train exited " + std::to_string(rc_a) + "/" + std::to_string(rc_b);
    fs::remove_all(root);
    return v;
  }

  const auto rows_a = metric_rows_no_wall(dir_a + "/metrics.csv");
  const auto rows_b = metric_rows_no_wall(dir_b + "/metrics.csv");
  const bool metrics_same = !rows_a.empty() && rows_a == rows_b;

  bool jsonl_same = true;
  {
    std::ifstream ja(dir_a + "/metrics.jsonl"), jb(dir_b + "/metrics.jsonl");
    std::string la, lb;
    while (true) {
      const bool ga = static_cast<bool>(std::getline(ja, la));
      const bool gb = static_cast<bool>(std::getline(jb, lb));
      if (ga != gb) {
        jsonl_same = false;
        break;
      }
      if (!ga) break;
      nlohmann::json a = nlohmann::json::parse(la), b = nlohmann::json::parse(lb);
      a.erase("wall_seconds");
      b.erase("wall_seconds");
      if (a != b) {
        jsonl_same = false;
        break;
      }
    }
  }

  bool ckpts_same = same_bytes(dir_a + "/final.bin", dir_b + "/final.bin");
  int n_ckpts = 1;
  for (const int64_t step : {50, 100, 150}) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_step%06lld.bin", static_cast<long long>(step));
    const std::string pa = dir_a + "/" + name, pb = dir_b + "/" + name;
    if (fs::exists(pa) || fs::exists(pb)) {
      ckpts_same = ckpts_same && same_bytes(pa, pb);
      ++n_ckpts;
    }
  }

  fs::remove_all(root);
  v.pass = metrics_same && jsonl_same && ckpts_same;
  v.detail = std::string("metrics rows ") + (metrics_same ? "identical" : "DIFFER") +
             " (wall column excluded), jsonl " + (jsonl_same ? "identical" : "DIFFER") +
             ", " + std::to_string(n_ckpts) + " checkpoints " +
             (ckpts_same ? "bitwise identical" : "DIFFER");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Entry> all_entries = {
      {1, "numerical core", criterion_numerical_core},
      {2, "systematic generalization", criterion_systematic_generalization},
      {3, "continual-learning contrast", criterion_continual},
      {4, "fixed-state verification", criterion_fixed_state},
      {5, "few-shot learning", criterion_fewshot},
      {6, "multi-step reasoning contrast", criterion_reasoning},
      {7, "episode/oracle consistency", criterion_audit},
      {8, "reproducibility", criterion_reproducibility},
  };

  // optional args: criterion ids to run (default all)
  std::vector<Entry> entries;
  if (argc > 1) {
    for (int i = 1; i < argc; ++i) {
      const int want = std::atoi(argv[i]);
      for (const auto& e : all_entries) {
        if (e.id == want) entries.push_back(e);
      }
    }
  } else {
    entries = all_entries;
  }

  int failures = 0;
  for (const auto& e : entries) {
    Verdict v;
    try {
      v = e.run();
    } catch (const std::exception& ex) {
      v.pass = false;
      v.detail = std::string("exception: ") + ex.what();
    }
    if (!v.pass) ++failures;
    std::cout << "criterion " << e.id << " (" << e.name << "): "
              << (v.pass ? "PASS" : "FAIL") << " - " << v.detail << "\n";
    std::cout.flush();
  }
  std::cerr << (8 - failures) << " of 8 criteria passed\n";
  return failures;
}
