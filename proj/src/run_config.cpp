#include "msl/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "msl/rng.hpp"

namespace msl {

using nlohmann::json;

namespace {

constexpr uint64_t kTagBankSeed = 0x626b7364;
constexpr uint64_t kTagEvalSeed = 0x6576616c;

GrammarConfig grammar_section(const json& d) {
  GrammarConfig g;
  if (d.contains("primitives")) g.primitives = d.at("primitives").get<std::vector<std::string>>();
  if (d.contains("symbols")) g.symbols = d.at("symbols").get<std::vector<std::string>>();
  g.n_demo_compositions = d.value("n_demo_compositions", g.n_demo_compositions);
  g.n_queries = d.value("n_queries", g.n_queries);
  g.n_bare_queries = d.value("n_bare_queries", g.n_bare_queries);
  g.shuffle_definitions = d.value("shuffle_definitions", g.shuffle_definitions);
  g.holdout_primitive = d.value("holdout_primitive", g.holdout_primitive);
  if (d.contains("fixed_assignment_seed")) {
    g.fixed_assignment_seed = d.at("fixed_assignment_seed").get<uint64_t>();
  }
  g.validate();
  return g;
}

struct BankSection {
  int64_t train_classes = 40;
  int64_t eval_classes = 20;
  int64_t min_hamming = 16;
  double noise_rate = 0.1;
};

BankSection bank_section(const json& d) {
  BankSection b;
  if (d.contains("bank")) {
    const json& jb = d.at("bank");
    b.train_classes = jb.value("train_classes", b.train_classes);
    b.eval_classes = jb.value("eval_classes", b.eval_classes);
    b.min_hamming = jb.value("min_hamming", b.min_hamming);
    b.noise_rate = jb.value("noise_rate", b.noise_rate);
  }
  if (b.train_classes < 1 || b.eval_classes < 1) {
    throw std::invalid_argument("run config: bank needs train and eval classes");
  }
  return b;
}

BankRef bank_ref(const BankSection& b, uint64_t data_seed, bool eval_slice) {
  BankRef ref;
  ref.seed = Rng::mix(data_seed, kTagBankSeed);
  ref.n_classes = b.train_classes + b.eval_classes;
  ref.min_hamming = b.min_hamming;
  ref.noise_rate = b.noise_rate;
  ref.class_lo = eval_slice ? b.train_classes : 0;
  ref.class_hi = eval_slice ? b.train_classes + b.eval_classes : b.train_classes;
  return ref;
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunConfig rc;
  rc.challenge = challenge_from_name(j.at("challenge").get<std::string>());

  if (j.contains("model")) {
    rc.model = ModelConfig::from_json(j.at("model").dump());
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    rc.optimizer.learning_rate = o.value("learning_rate", rc.optimizer.learning_rate);
    rc.optimizer.beta1 = o.value("beta1", rc.optimizer.beta1);
    rc.optimizer.beta2 = o.value("beta2", rc.optimizer.beta2);
    rc.optimizer.eps = o.value("eps", rc.optimizer.eps);
    rc.optimizer.clip_norm = o.value("clip_norm", rc.optimizer.clip_norm);
    rc.optimizer.batch_size = o.value("batch_size", rc.optimizer.batch_size);
    rc.optimizer.total_steps = o.value("total_steps", rc.optimizer.total_steps);
    rc.optimizer.eval_every = o.value("eval_every", rc.optimizer.eval_every);
  }
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    rc.data_seed = s.value("data", rc.data_seed);
    rc.init_seed = s.value("init", rc.init_seed);
    rc.optimizer.seed = s.value("train", rc.optimizer.seed);
  }
  rc.eval_seed = Rng::mix(rc.data_seed, kTagEvalSeed);
  rc.out_dir = j.value("out_dir", rc.out_dir);
  rc.checkpoint_every = j.value("checkpoint_every", rc.checkpoint_every);
  rc.n_eval_episodes = j.value("n_eval_episodes", rc.n_eval_episodes);
  if (rc.n_eval_episodes < 1) throw std::invalid_argument("run config: n_eval_episodes < 1");

  const json data = j.value("data", json::object());
  rc.train_gen.challenge = rc.challenge;
  rc.eval_gen.challenge = rc.challenge;
  switch (rc.challenge) {
    case Challenge::sysgen: {
      rc.train_gen.grammar = grammar_section(data);
      rc.eval_gen.grammar = rc.train_gen.grammar;
      rc.train_gen.heldout_eval = false;
      rc.eval_gen.heldout_eval = true;
      break;
    }
    case Challenge::fewshot: {
      rc.train_gen.fewshot.n_way = data.value("n_way", rc.train_gen.fewshot.n_way);
      rc.train_gen.fewshot.k_shot = data.value("k_shot", rc.train_gen.fewshot.k_shot);
      rc.train_gen.fewshot.n_query_per_class =
          data.value("n_query_per_class", rc.train_gen.fewshot.n_query_per_class);
      rc.train_gen.fewshot.validate();
      rc.eval_gen.fewshot = rc.train_gen.fewshot;
      const BankSection b = bank_section(data);
      rc.train_gen.bank = bank_ref(b, rc.data_seed, false);
      rc.eval_gen.bank = bank_ref(b, rc.data_seed, true);
      break;
    }
    case Challenge::continual: {
      rc.train_gen.continual.n_tasks = data.value("n_tasks", rc.train_gen.continual.n_tasks);
      rc.train_gen.continual.classes_per_task =
          data.value("classes_per_task", rc.train_gen.continual.classes_per_task);
      rc.train_gen.continual.demos_per_class =
          data.value("demos_per_class", rc.train_gen.continual.demos_per_class);
      rc.train_gen.continual.queries_per_task =
          data.value("queries_per_task", rc.train_gen.continual.queries_per_task);
      rc.train_gen.continual.validate();
      rc.eval_gen.continual = rc.train_gen.continual;
      const BankSection b = bank_section(data);
      rc.train_gen.bank = bank_ref(b, rc.data_seed, false);
      rc.eval_gen.bank = bank_ref(b, rc.data_seed, true);
      break;
    }
    case Challenge::reasoning: {
      rc.train_gen.reasoning.min_digits =
          data.value("min_digits", rc.train_gen.reasoning.min_digits);
      rc.train_gen.reasoning.max_digits =
          data.value("max_digits", rc.train_gen.reasoning.max_digits);
      rc.train_gen.reasoning.n_operands =
          data.value("n_operands", rc.train_gen.reasoning.n_operands);
      rc.train_gen.reasoning.answer_only =
          data.value("answer_only", rc.train_gen.reasoning.answer_only);
      rc.train_gen.reasoning.validate();
      rc.eval_gen.reasoning = rc.train_gen.reasoning;
      break;
    }
  }

  const Vocab v = Vocab::for_config(rc.train_gen);
  rc.model.vocab_size = v.size();
  rc.model.vector_input_dim =
      (rc.challenge == Challenge::fewshot || rc.challenge == Challenge::continual) ? 64 : 0;
  rc.model.validate();
  rc.optimizer.validate();
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("run config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig rc;
  try {
    rc = from_json(ss.str());
  } catch (const json::exception& e) {
    throw std::runtime_error("run config: '" + path + "': " + e.what());
  }
  if (const char* env = std::getenv("MSL_OUT_DIR"); env && *env) {
    rc.out_dir = env;
  }
  return rc;
}

std::string RunConfig::canonical_json() const {
  json j;
  j["challenge"] = challenge_name(challenge);
  j["model"] = json::parse(model.canonical_json());
  j["optimizer"] = {{"learning_rate", optimizer.learning_rate},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"clip_norm", optimizer.clip_norm},
                    {"batch_size", optimizer.batch_size},
                    {"total_steps", optimizer.total_steps},
                    {"eval_every", optimizer.eval_every}};
  j["seeds"] = {{"data", data_seed}, {"init", init_seed}, {"train", optimizer.seed}};
  j["train_gen"] = json::parse(train_gen.canonical_json());
  j["eval_gen"] = json::parse(eval_gen.canonical_json());
  j["out_dir"] = out_dir;
  j["checkpoint_every"] = checkpoint_every;
  j["n_eval_episodes"] = n_eval_episodes;
  return j.dump(2);
}

Vocab RunConfig::vocab() const { return Vocab::for_config(train_gen); }

std::vector<Episode> RunConfig::make_eval_episodes() const {
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(n_eval_episodes));
  for (int64_t i = 0; i < n_eval_episodes; ++i) {
    out.push_back(generate_episode(eval_gen, Rng::mix(eval_seed, static_cast<uint64_t>(i))));
  }
  return out;
}

EpisodeStream RunConfig::train_stream() const {
  EpisodeStream s;
  s.config = train_gen;
  s.data_seed = data_seed;
  return s;
}

}  // namespace msl
