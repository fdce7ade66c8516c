#include "msl/episode.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "msl/digest.hpp"
#include "msl/rng.hpp"

namespace msl {

using nlohmann::json;

namespace {

constexpr uint64_t kTagAssignment = 0x6173676e;  // stream keys for split rngs
constexpr uint64_t kTagSysgen = 0x73797367;
constexpr uint64_t kTagFewshot = 0x66657773;
constexpr uint64_t kTagContinual = 0x636f6e74;
constexpr uint64_t kTagReasoning = 0x7265736e;
constexpr uint64_t kTagShuffleLabels = 0x73686c62;

const std::vector<std::string> kModifiers = {"twice", "thrice"};

std::string label_token(int64_t i) { return "L" + std::to_string(i); }

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

}  // namespace

std::string challenge_name(Challenge c) {
  switch (c) {
    case Challenge::sysgen: return "sysgen";
    case Challenge::continual: return "continual";
    case Challenge::fewshot: return "fewshot";
    case Challenge::reasoning: return "reasoning";
  }
  throw std::invalid_argument("challenge_name: bad enum");
}

Challenge challenge_from_name(const std::string& name) {
  if (name == "sysgen") return Challenge::sysgen;
  if (name == "continual") return Challenge::continual;
  if (name == "fewshot") return Challenge::fewshot;
  if (name == "reasoning") return Challenge::reasoning;
  throw std::invalid_argument("challenge: unknown name '" + name + "'");
}

EpisodeItem EpisodeItem::of_tokens(std::vector<std::string> t) {
  EpisodeItem it;
  it.tokens = std::move(t);
  return it;
}

EpisodeItem EpisodeItem::of_vec(std::vector<double> v) {
  EpisodeItem it;
  it.vec = std::move(v);
  return it;
}

// ===== grammar =====

void GrammarConfig::validate() const {
  if (primitives.size() < 2) {
    throw std::invalid_argument("grammar: need >= 2 primitives to withhold one");
  }
  if (symbols.size() < primitives.size()) {
    throw std::invalid_argument("grammar: need at least as many symbols as primitives");
  }
  if (n_demo_compositions < 0) throw std::invalid_argument("grammar: n_demo_compositions < 0");
  if (n_queries < 1) throw std::invalid_argument("grammar: n_queries must be >= 1");
  if (n_bare_queries < 0 || n_bare_queries > static_cast<int64_t>(primitives.size())) {
    throw std::invalid_argument("grammar: n_bare_queries must be in [0, #primitives]");
  }
  if (holdout_primitive < 0 ||
      holdout_primitive >= static_cast<int64_t>(primitives.size())) {
    throw std::invalid_argument("grammar: holdout_primitive index out of range");
  }
  for (const auto& p : primitives) {
    if (p == "twice" || p == "thrice" || p == "and") {
      throw std::invalid_argument("grammar: primitive '" + p + "' collides with a modifier");
    }
  }
}

InterpretationGrammar make_grammar(const GrammarConfig& config, uint64_t assignment_seed) {
  config.validate();
  InterpretationGrammar g;
  g.primitives = config.primitives;
  g.symbols = config.symbols;
  Rng rng(Rng::mix(assignment_seed, kTagAssignment));
  std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(config.symbols.size()));
  for (size_t i = 0; i < config.primitives.size(); ++i) {
    g.assignment[config.primitives[i]] = config.symbols[static_cast<size_t>(perm[i])];
  }
  return g;
}

namespace {

struct Phrase {
  std::string prim;
  int64_t repeat = 1;
};

// phrase := PRIM | PRIM twice | PRIM thrice
Phrase parse_phrase(const InterpretationGrammar& g, const std::vector<std::string>& c,
                    size_t& pos) {
  if (pos >= c.size()) throw std::runtime_error("interpret: expected primitive, found end");
  const std::string& word = c[pos];
  if (!g.assignment.count(word)) {
    throw std::runtime_error("interpret: unknown primitive '" + word + "' in '" + join(c) + "'");
  }
  Phrase ph;
  ph.prim = word;
  ++pos;
  if (pos < c.size() && (c[pos] == "twice" || c[pos] == "thrice")) {
    ph.repeat = c[pos] == "twice" ? 2 : 3;
    ++pos;
  }
  return ph;
}

}  // namespace

std::vector<std::string> interpret(const InterpretationGrammar& grammar,
                                   const std::vector<std::string>& command) {
  if (command.empty()) throw std::runtime_error("interpret: empty command");
  size_t pos = 0;
  std::vector<Phrase> phrases;
  phrases.push_back(parse_phrase(grammar, command, pos));
  while (pos < command.size()) {
    if (command[pos] != "and") {
      throw std::runtime_error("interpret: unexpected token '" + command[pos] + "' in '" +
                               join(command) + "'");
    }
    ++pos;
    phrases.push_back(parse_phrase(grammar, command, pos));
  }
  // Innermost first: each primitive rewrites to its symbol, repetition applies
  // to the phrase, conjunction concatenates left to right.
  std::vector<std::string> out;
  for (const auto& ph : phrases) {
    const std::string& sym = grammar.assignment.at(ph.prim);
    for (int64_t r = 0; r < ph.repeat; ++r) out.push_back(sym);
  }
  return out;
}

std::vector<std::vector<std::string>> all_commands(const GrammarConfig& config) {
  std::vector<std::vector<std::string>> phrases;
  for (const auto& p : config.primitives) {
    phrases.push_back({p});
    for (const auto& m : kModifiers) phrases.push_back({p, m});
  }
  std::vector<std::vector<std::string>> out;
  for (const auto& p : config.primitives) out.push_back({p});
  for (const auto& p : config.primitives)
    for (const auto& m : kModifiers) out.push_back({p, m});
  for (const auto& a : phrases) {
    for (const auto& b : phrases) {
      std::vector<std::string> c = a;
      c.push_back("and");
      c.insert(c.end(), b.begin(), b.end());
      out.push_back(std::move(c));
    }
  }
  return out;
}

std::vector<std::vector<std::string>> compositional_commands(const GrammarConfig& config) {
  auto cmds = all_commands(config);
  std::vector<std::vector<std::string>> out;
  for (auto& c : cmds) {
    if (c.size() > 1) out.push_back(std::move(c));
  }
  return out;
}

bool mentions_primitive(const std::vector<std::string>& command, const std::string& prim) {
  return std::find(command.begin(), command.end(), prim) != command.end();
}

// ===== spec validation =====

void FewshotSpec::validate() const {
  if (n_way < 2) throw std::invalid_argument("fewshot: n_way must be >= 2");
  if (k_shot < 1) throw std::invalid_argument("fewshot: k_shot must be >= 1");
  if (n_query_per_class < 1) throw std::invalid_argument("fewshot: n_query_per_class must be >= 1");
}

void ContinualSpec::validate() const {
  if (n_tasks < 1) throw std::invalid_argument("continual: n_tasks must be >= 1");
  if (classes_per_task < 1) throw std::invalid_argument("continual: classes_per_task must be >= 1");
  if (demos_per_class < 1) throw std::invalid_argument("continual: demos_per_class must be >= 1");
  if (queries_per_task < 1) throw std::invalid_argument("continual: queries_per_task must be >= 1");
}

void ReasoningSpec::validate() const {
  if (min_digits < 1) throw std::invalid_argument("reasoning: min_digits must be >= 1");
  if (max_digits < min_digits) throw std::invalid_argument("reasoning: max_digits < min_digits");
  if (n_operands < 2 || n_operands > 9) {
    throw std::invalid_argument("reasoning: n_operands must be in [2,9] to keep carries single-digit");
  }
  if (schema_version != 1) {
    throw std::invalid_argument("reasoning: unsupported schema_version " +
                                std::to_string(schema_version));
  }
}

// ===== generators =====

Episode gen_sysgen_episode(const GrammarConfig& config, uint64_t seed, bool heldout_eval) {
  config.validate();
  const uint64_t assignment_seed =
      config.fixed_assignment_seed ? *config.fixed_assignment_seed
                                   : Rng::mix(seed, kTagAssignment);
  InterpretationGrammar grammar = make_grammar(config, assignment_seed);
  Rng rng(Rng::mix(seed, kTagSysgen));

  const std::string holdout = config.primitives[static_cast<size_t>(config.holdout_primitive)];
  std::vector<std::vector<std::string>> train_pool, heldout_pool;
  for (auto& c : compositional_commands(config)) {
    (mentions_primitive(c, holdout) ? heldout_pool : train_pool).push_back(std::move(c));
  }
  const int64_t need_train =
      config.n_demo_compositions + (heldout_eval ? 0 : config.n_queries);
  if (static_cast<int64_t>(train_pool.size()) < need_train) {
    throw std::invalid_argument("grammar: pool of " + std::to_string(train_pool.size()) +
                                " non-withheld compositions cannot supply " +
                                std::to_string(need_train) + " distinct commands");
  }
  if (heldout_eval && static_cast<int64_t>(heldout_pool.size()) < config.n_queries) {
    throw std::invalid_argument("grammar: withheld pool too small for requested queries");
  }

  Episode ep;
  ep.challenge = Challenge::sysgen;
  ep.seed = seed;

  // Definitions for every primitive. Shuffled order makes the lookup purely
  // content-addressed; pinned order lets position carry part of it.
  std::vector<int64_t> def_order(config.primitives.size());
  std::iota(def_order.begin(), def_order.end(), 0);
  if (config.shuffle_definitions) {
    def_order = rng.permutation(static_cast<int64_t>(config.primitives.size()));
  }
  for (int64_t i : def_order) {
    const std::string& p = config.primitives[static_cast<size_t>(i)];
    ep.demo.emplace_back(EpisodeItem::of_tokens({p}),
                         EpisodeItem::of_tokens(interpret(grammar, {p})));
  }

  // Compositional demos, then queries, drawn without replacement.
  std::vector<int64_t> picks = rng.permutation(static_cast<int64_t>(train_pool.size()));
  for (int64_t i = 0; i < config.n_demo_compositions; ++i) {
    const auto& cmd = train_pool[static_cast<size_t>(picks[static_cast<size_t>(i)])];
    ep.demo.emplace_back(EpisodeItem::of_tokens(cmd),
                         EpisodeItem::of_tokens(interpret(grammar, cmd)));
  }
  if (heldout_eval) {
    std::vector<int64_t> qpicks = rng.permutation(static_cast<int64_t>(heldout_pool.size()));
    for (int64_t i = 0; i < config.n_queries; ++i) {
      const auto& cmd = heldout_pool[static_cast<size_t>(qpicks[static_cast<size_t>(i)])];
      ep.query.push_back(EpisodeItem::of_tokens(cmd));
      ep.target.push_back(EpisodeItem::of_tokens(interpret(grammar, cmd)));
    }
  } else {
    // Bare lookups first: cheap direct supervision of the word -> symbol
    // binding, before the compositional queries that build on it.
    if (config.n_bare_queries > 0) {
      std::vector<int64_t> bare_order =
          rng.permutation(static_cast<int64_t>(config.primitives.size()));
      for (int64_t i = 0; i < config.n_bare_queries; ++i) {
        const std::vector<std::string> cmd{
            config.primitives[static_cast<size_t>(bare_order[static_cast<size_t>(i)])]};
        ep.query.push_back(EpisodeItem::of_tokens(cmd));
        ep.target.push_back(EpisodeItem::of_tokens(interpret(grammar, cmd)));
      }
    }
    for (int64_t i = 0; i < config.n_queries; ++i) {
      const auto& cmd = train_pool[static_cast<size_t>(
          picks[static_cast<size_t>(config.n_demo_compositions + i)])];
      ep.query.push_back(EpisodeItem::of_tokens(cmd));
      ep.target.push_back(EpisodeItem::of_tokens(interpret(grammar, cmd)));
    }
  }
  return ep;
}

namespace {

// Fresh instance that is not a byte-for-byte copy of anything in `taken`.
// With zero noise an identical copy is the only possibility, so pass through.
std::vector<double> fresh_instance(const SyntheticClass& cls, Rng& rng,
                                   const std::vector<std::vector<double>>& taken) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<double> v = sample_instance(cls, rng.next_u64());
    if (cls.noise_rate == 0.0) return v;
    bool dup = false;
    for (const auto& t : taken) dup = dup || t == v;
    if (!dup) return v;
  }
  return sample_instance(cls, rng.next_u64());
}

}  // namespace

Episode gen_fewshot_episode(const FewshotSpec& spec, const std::vector<SyntheticClass>& bank,
                            uint64_t seed) {
  spec.validate();
  if (static_cast<int64_t>(bank.size()) < spec.n_way) {
    throw std::invalid_argument("fewshot: bank of " + std::to_string(bank.size()) +
                                " classes cannot support " + std::to_string(spec.n_way) + "-way");
  }
  Rng rng(Rng::mix(seed, kTagFewshot));
  std::vector<int64_t> class_pick = rng.permutation(static_cast<int64_t>(bank.size()));
  std::vector<int64_t> label_perm = rng.permutation(spec.n_way);

  Episode ep;
  ep.challenge = Challenge::fewshot;
  ep.seed = seed;

  std::vector<std::vector<double>> demo_instances;
  std::vector<std::pair<EpisodeItem, EpisodeItem>> demo;
  for (int64_t c = 0; c < spec.n_way; ++c) {
    const SyntheticClass& cls = bank[static_cast<size_t>(class_pick[static_cast<size_t>(c)])];
    const std::string label = label_token(label_perm[static_cast<size_t>(c)]);
    for (int64_t k = 0; k < spec.k_shot; ++k) {
      std::vector<double> inst = sample_instance(cls, rng.next_u64());
      demo_instances.push_back(inst);
      demo.emplace_back(EpisodeItem::of_vec(std::move(inst)), EpisodeItem::of_tokens({label}));
    }
  }
  rng.shuffle(demo);
  ep.demo = std::move(demo);

  struct Q {
    EpisodeItem in, out;
  };
  std::vector<Q> queries;
  for (int64_t c = 0; c < spec.n_way; ++c) {
    const SyntheticClass& cls = bank[static_cast<size_t>(class_pick[static_cast<size_t>(c)])];
    const std::string label = label_token(label_perm[static_cast<size_t>(c)]);
    for (int64_t q = 0; q < spec.n_query_per_class; ++q) {
      queries.push_back({EpisodeItem::of_vec(fresh_instance(cls, rng, demo_instances)),
                         EpisodeItem::of_tokens({label})});
    }
  }
  rng.shuffle(queries);
  for (auto& q : queries) {
    ep.query.push_back(std::move(q.in));
    ep.target.push_back(std::move(q.out));
  }
  return ep;
}

Episode gen_continual_episode(const ContinualSpec& spec,
                              const std::vector<SyntheticClass>& bank, uint64_t seed) {
  spec.validate();
  const int64_t n_needed = spec.n_tasks * spec.classes_per_task;
  if (static_cast<int64_t>(bank.size()) < n_needed) {
    throw std::invalid_argument("continual: bank of " + std::to_string(bank.size()) +
                                " classes cannot fill " + std::to_string(spec.n_tasks) +
                                " tasks of " + std::to_string(spec.classes_per_task));
  }
  Rng rng(Rng::mix(seed, kTagContinual));
  std::vector<int64_t> class_pick = rng.permutation(static_cast<int64_t>(bank.size()));
  std::vector<int64_t> label_perm = rng.permutation(n_needed);

  Episode ep;
  ep.challenge = Challenge::continual;
  ep.seed = seed;

  std::vector<std::vector<double>> demo_instances;
  for (int64_t t = 0; t < spec.n_tasks; ++t) {
    std::vector<std::pair<EpisodeItem, EpisodeItem>> block;
    for (int64_t c = 0; c < spec.classes_per_task; ++c) {
      const int64_t slot = t * spec.classes_per_task + c;
      const SyntheticClass& cls = bank[static_cast<size_t>(class_pick[static_cast<size_t>(slot)])];
      const std::string label = label_token(label_perm[static_cast<size_t>(slot)]);
      for (int64_t k = 0; k < spec.demos_per_class; ++k) {
        std::vector<double> inst = sample_instance(cls, rng.next_u64());
        demo_instances.push_back(inst);
        block.emplace_back(EpisodeItem::of_vec(std::move(inst)), EpisodeItem::of_tokens({label}));
      }
    }
    rng.shuffle(block);  // shuffled within the task, never across tasks
    for (auto& pair : block) {
      ep.demo.push_back(std::move(pair));
      ep.demo_task.push_back(t);
    }
  }

  struct Q {
    EpisodeItem in, out;
    int64_t task;
  };
  std::vector<Q> queries;
  for (int64_t t = 0; t < spec.n_tasks; ++t) {
    for (int64_t q = 0; q < spec.queries_per_task; ++q) {
      const int64_t c = q % spec.classes_per_task;
      const int64_t slot = t * spec.classes_per_task + c;
      const SyntheticClass& cls = bank[static_cast<size_t>(class_pick[static_cast<size_t>(slot)])];
      const std::string label = label_token(label_perm[static_cast<size_t>(slot)]);
      queries.push_back({EpisodeItem::of_vec(fresh_instance(cls, rng, demo_instances)),
                         EpisodeItem::of_tokens({label}), t});
    }
  }
  rng.shuffle(queries);
  for (auto& q : queries) {
    ep.query.push_back(std::move(q.in));
    ep.target.push_back(std::move(q.out));
    ep.query_task.push_back(q.task);
  }
  return ep;
}

// ===== reasoning =====

namespace {

std::vector<int64_t> digits_lsd_first(int64_t value) {
  std::vector<int64_t> d;
  if (value == 0) return {0};
  while (value > 0) {
    d.push_back(value % 10);
    value /= 10;
  }
  return d;
}

}  // namespace

std::vector<std::string> reasoning_trace(const std::vector<int64_t>& operands,
                                         int64_t n_columns) {
  std::vector<std::vector<int64_t>> digs;
  for (int64_t v : operands) digs.push_back(digits_lsd_first(v));
  std::vector<std::string> out;
  int64_t carry = 0;
  for (int64_t col = 0; col < n_columns; ++col) {
    int64_t s = carry;
    for (const auto& d : digs) {
      if (col < static_cast<int64_t>(d.size())) s += d[static_cast<size_t>(col)];
    }
    out.push_back(std::to_string(s % 10));
    carry = s / 10;
    out.push_back(std::to_string(carry));
  }
  return out;
}

std::vector<std::string> reasoning_answer(const std::vector<int64_t>& operands) {
  int64_t total = 0;
  for (int64_t v : operands) total += v;
  std::vector<int64_t> d = digits_lsd_first(total);
  std::vector<std::string> out;
  for (auto it = d.rbegin(); it != d.rend(); ++it) out.push_back(std::to_string(*it));
  return out;
}

Episode gen_reasoning_example(const ReasoningSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(Rng::mix(seed, kTagReasoning));

  std::vector<int64_t> operands;
  std::vector<std::string> query;
  int64_t n_columns = 0;
  for (int64_t i = 0; i < spec.n_operands; ++i) {
    const int64_t len = rng.uniform_int(spec.min_digits, spec.max_digits);
    n_columns = std::max(n_columns, len);
    int64_t value = 0;
    std::vector<int64_t> ds(static_cast<size_t>(len));
    for (int64_t j = 0; j < len; ++j) {
      const bool leading = j == 0 && len > 1;
      ds[static_cast<size_t>(j)] = rng.uniform_int(leading ? 1 : 0, 9);
      value = value * 10 + ds[static_cast<size_t>(j)];
    }
    operands.push_back(value);
    if (i) query.push_back("+");
    for (int64_t dgt : ds) query.push_back(std::to_string(dgt));
  }

  Episode ep;
  ep.challenge = Challenge::reasoning;
  ep.seed = seed;
  ep.query.push_back(EpisodeItem::of_tokens(std::move(query)));

  std::vector<std::string> target;
  if (!spec.answer_only) {
    target = reasoning_trace(operands, n_columns);
    target.push_back("=");
  }
  const std::vector<std::string> answer = reasoning_answer(operands);
  target.insert(target.end(), answer.begin(), answer.end());
  ep.target.push_back(EpisodeItem::of_tokens(std::move(target)));
  return ep;
}

Episode shuffle_demo_labels(const Episode& episode, uint64_t seed) {
  Episode out = episode;
  Rng rng(Rng::mix(seed, kTagShuffleLabels));
  std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(out.demo.size()));
  for (size_t i = 0; i < out.demo.size(); ++i) {
    out.demo[i].second = episode.demo[static_cast<size_t>(perm[i])].second;
  }
  return out;
}

// ===== bank slices =====

std::vector<SyntheticClass> realize_bank_slice(const BankRef& ref) {
  if (ref.n_classes < 1) throw std::invalid_argument("bank: n_classes must be >= 1");
  if (ref.class_lo < 0 || ref.class_hi <= ref.class_lo || ref.class_hi > ref.n_classes) {
    throw std::invalid_argument("bank: bad class slice [" + std::to_string(ref.class_lo) +
                                "," + std::to_string(ref.class_hi) + ") of " +
                                std::to_string(ref.n_classes));
  }
  const std::vector<SyntheticClass> bank =
      gen_class_bank(ref.n_classes, ref.min_hamming, ref.seed, ref.noise_rate);
  return {bank.begin() + ref.class_lo, bank.begin() + ref.class_hi};
}

// ===== generator config plumbing =====

namespace {

json grammar_to_json(const GrammarConfig& g) {
  json j;
  j["primitives"] = g.primitives;
  j["symbols"] = g.symbols;
  j["n_demo_compositions"] = g.n_demo_compositions;
  j["n_queries"] = g.n_queries;
  j["n_bare_queries"] = g.n_bare_queries;
  j["shuffle_definitions"] = g.shuffle_definitions;
  j["holdout_primitive"] = g.holdout_primitive;
  if (g.fixed_assignment_seed) j["fixed_assignment_seed"] = *g.fixed_assignment_seed;
  return j;
}

GrammarConfig grammar_from_json(const json& j) {
  GrammarConfig g;
  g.primitives = j.at("primitives").get<std::vector<std::string>>();
  g.symbols = j.at("symbols").get<std::vector<std::string>>();
  g.n_demo_compositions = j.value("n_demo_compositions", g.n_demo_compositions);
  g.n_queries = j.value("n_queries", g.n_queries);
  g.n_bare_queries = j.value("n_bare_queries", g.n_bare_queries);
  g.shuffle_definitions = j.value("shuffle_definitions", g.shuffle_definitions);
  g.holdout_primitive = j.value("holdout_primitive", g.holdout_primitive);
  if (j.contains("fixed_assignment_seed")) {
    g.fixed_assignment_seed = j.at("fixed_assignment_seed").get<uint64_t>();
  }
  return g;
}

json bank_to_json(const BankRef& b) {
  json j;
  j["seed"] = b.seed;
  j["n_classes"] = b.n_classes;
  j["min_hamming"] = b.min_hamming;
  j["noise_rate"] = b.noise_rate;
  j["class_lo"] = b.class_lo;
  j["class_hi"] = b.class_hi;
  return j;
}

BankRef bank_from_json(const json& j) {
  BankRef b;
  b.seed = j.at("seed").get<uint64_t>();
  b.n_classes = j.at("n_classes").get<int64_t>();
  b.min_hamming = j.value("min_hamming", b.min_hamming);
  b.noise_rate = j.value("noise_rate", b.noise_rate);
  b.class_lo = j.at("class_lo").get<int64_t>();
  b.class_hi = j.at("class_hi").get<int64_t>();
  return b;
}

}  // namespace

std::string EpisodeGenConfig::canonical_json() const {
  json j;
  j["challenge"] = challenge_name(challenge);
  j["heldout_eval"] = heldout_eval;
  switch (challenge) {
    case Challenge::sysgen:
      j["grammar"] = grammar_to_json(grammar);
      break;
    case Challenge::fewshot:
      j["fewshot"] = {{"n_way", fewshot.n_way},
                      {"k_shot", fewshot.k_shot},
                      {"n_query_per_class", fewshot.n_query_per_class}};
      j["bank"] = bank_to_json(bank);
      break;
    case Challenge::continual:
      j["continual"] = {{"n_tasks", continual.n_tasks},
                        {"classes_per_task", continual.classes_per_task},
                        {"demos_per_class", continual.demos_per_class},
                        {"queries_per_task", continual.queries_per_task}};
      j["bank"] = bank_to_json(bank);
      break;
    case Challenge::reasoning:
      j["reasoning"] = {{"min_digits", reasoning.min_digits},
                        {"max_digits", reasoning.max_digits},
                        {"n_operands", reasoning.n_operands},
                        {"answer_only", reasoning.answer_only},
                        {"schema_version", reasoning.schema_version}};
      break;
  }
  return j.dump();
}

EpisodeGenConfig EpisodeGenConfig::from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  EpisodeGenConfig c;
  c.challenge = challenge_from_name(j.at("challenge").get<std::string>());
  c.heldout_eval = j.value("heldout_eval", false);
  switch (c.challenge) {
    case Challenge::sysgen:
      c.grammar = grammar_from_json(j.at("grammar"));
      break;
    case Challenge::fewshot: {
      const json& f = j.at("fewshot");
      c.fewshot.n_way = f.value("n_way", c.fewshot.n_way);
      c.fewshot.k_shot = f.value("k_shot", c.fewshot.k_shot);
      c.fewshot.n_query_per_class = f.value("n_query_per_class", c.fewshot.n_query_per_class);
      c.bank = bank_from_json(j.at("bank"));
      break;
    }
    case Challenge::continual: {
      const json& f = j.at("continual");
      c.continual.n_tasks = f.value("n_tasks", c.continual.n_tasks);
      c.continual.classes_per_task = f.value("classes_per_task", c.continual.classes_per_task);
      c.continual.demos_per_class = f.value("demos_per_class", c.continual.demos_per_class);
      c.continual.queries_per_task = f.value("queries_per_task", c.continual.queries_per_task);
      c.bank = bank_from_json(j.at("bank"));
      break;
    }
    case Challenge::reasoning: {
      const json& f = j.at("reasoning");
      c.reasoning.min_digits = f.value("min_digits", c.reasoning.min_digits);
      c.reasoning.max_digits = f.value("max_digits", c.reasoning.max_digits);
      c.reasoning.n_operands = f.value("n_operands", c.reasoning.n_operands);
      c.reasoning.answer_only = f.value("answer_only", c.reasoning.answer_only);
      c.reasoning.schema_version = f.value("schema_version", c.reasoning.schema_version);
      break;
    }
  }
  return c;
}

uint64_t EpisodeGenConfig::digest() const { return fnv1a64(canonical_json()); }

namespace {

// Rebuilding a class bank per episode would repeat the rejection sampling
// thousands of times; memoize on the serialized bank reference.
const std::vector<SyntheticClass>& cached_bank_slice(const BankRef& ref) {
  static std::map<std::string, std::vector<SyntheticClass>> cache;
  const std::string key = bank_to_json(ref).dump();
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, realize_bank_slice(ref)).first;
  return it->second;
}

}  // namespace

Episode generate_episode(const EpisodeGenConfig& config, uint64_t seed) {
  Episode ep;
  switch (config.challenge) {
    case Challenge::sysgen:
      ep = gen_sysgen_episode(config.grammar, seed, config.heldout_eval);
      break;
    case Challenge::fewshot:
      ep = gen_fewshot_episode(config.fewshot, cached_bank_slice(config.bank), seed);
      break;
    case Challenge::continual:
      ep = gen_continual_episode(config.continual, cached_bank_slice(config.bank), seed);
      break;
    case Challenge::reasoning:
      ep = gen_reasoning_example(config.reasoning, seed);
      break;
  }
  ep.gen_config_json = config.canonical_json();
  ep.digest = fnv1a64(ep.gen_config_json);
  return ep;
}

// ===== vocab =====

void Vocab::push(const std::string& token) {
  if (index_.count(token)) throw std::invalid_argument("vocab: duplicate token '" + token + "'");
  index_[token] = static_cast<int64_t>(tokens_.size());
  tokens_.push_back(token);
}

Vocab Vocab::for_sysgen(const GrammarConfig& config) {
  config.validate();
  Vocab v;
  for (const std::string& s : {"->", "|", "?", ".", "/"}) v.push(s);
  for (const auto& p : config.primitives) v.push(p);
  v.push("twice");
  v.push("thrice");
  v.push("and");
  for (const auto& s : config.symbols) v.push(s);
  return v;
}

Vocab Vocab::for_labels(int64_t n_labels) {
  if (n_labels < 1) throw std::invalid_argument("vocab: n_labels must be >= 1");
  Vocab v;
  for (const std::string& s : {"->", "|", "?", ".", "/"}) v.push(s);
  for (int64_t i = 0; i < n_labels; ++i) v.push(label_token(i));
  return v;
}

Vocab Vocab::for_reasoning() {
  Vocab v;
  for (const std::string& s : {"->", "|", "?", ".", "/"}) v.push(s);
  for (int64_t i = 0; i < 10; ++i) v.push(std::to_string(i));
  v.push("+");
  v.push("=");
  return v;
}

Vocab Vocab::for_config(const EpisodeGenConfig& config) {
  switch (config.challenge) {
    case Challenge::sysgen: return for_sysgen(config.grammar);
    case Challenge::fewshot: return for_labels(config.fewshot.n_way);
    case Challenge::continual:
      return for_labels(config.continual.n_tasks * config.continual.classes_per_task);
    case Challenge::reasoning: return for_reasoning();
  }
  throw std::invalid_argument("vocab: bad challenge");
}

int64_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw std::invalid_argument("vocab: unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(int64_t id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("vocab: id " + std::to_string(id) + " outside table of " +
                            std::to_string(size()));
  }
  return tokens_[static_cast<size_t>(id)];
}

bool Vocab::contains(const std::string& token) const { return index_.count(token) > 0; }

// ===== encoding =====

EncodedEpisode encode_episode(const Episode& episode, const Vocab& vocab,
                              int64_t max_seq_len) {
  EncodedEpisode enc;
  auto push_plain = [&](StreamItem item) {
    enc.items.push_back(std::move(item));
    enc.loss_mask.push_back(0);
    enc.supervision.push_back(-1);
  };
  auto push_supervised = [&](int64_t token) {
    enc.items.push_back(StreamItem::of_token(token));
    enc.loss_mask.push_back(1);
    enc.supervision.push_back(token);
  };
  auto push_input_item = [&](const EpisodeItem& item) {
    if (item.is_vec()) {
      push_plain(StreamItem::of_vec(item.vec));
    } else {
      for (const auto& t : item.tokens) push_plain(StreamItem::of_token(vocab.id(t)));
    }
  };

  if (!episode.demo_task.empty() &&
      episode.demo_task.size() != episode.demo.size()) {
    throw std::invalid_argument("encode: demo_task length mismatch");
  }
  if (episode.query.size() != episode.target.size()) {
    throw std::invalid_argument("encode: query/target length mismatch");
  }

  int64_t prev_task = -1;
  for (size_t i = 0; i < episode.demo.size(); ++i) {
    if (!episode.demo_task.empty()) {
      const int64_t task = episode.demo_task[i];
      if (task != prev_task && prev_task >= 0) push_plain(StreamItem::of_token(vocab.task_sep()));
      prev_task = task;
    }
    push_input_item(episode.demo[i].first);
    push_plain(StreamItem::of_token(vocab.arrow()));
    const EpisodeItem& out = episode.demo[i].second;
    if (out.is_vec()) throw std::invalid_argument("encode: demo outputs must be tokens");
    for (const auto& t : out.tokens) push_plain(StreamItem::of_token(vocab.id(t)));
    push_plain(StreamItem::of_token(vocab.pair_sep()));
  }

  push_plain(StreamItem::of_token(vocab.query_sep()));

  for (size_t i = 0; i < episode.query.size(); ++i) {
    push_input_item(episode.query[i]);
    push_plain(StreamItem::of_token(vocab.arrow()));
    const EpisodeItem& tgt = episode.target[i];
    if (tgt.is_vec()) throw std::invalid_argument("encode: targets must be tokens");
    EncodedEpisode::QuerySlot slot;
    slot.answer_start = static_cast<int64_t>(enc.items.size());
    slot.answer_len = static_cast<int64_t>(tgt.tokens.size());
    for (const auto& t : tgt.tokens) push_supervised(vocab.id(t));
    push_supervised(vocab.end_of_target());
    enc.slots.push_back(slot);
  }

  if (static_cast<int64_t>(enc.items.size()) > max_seq_len) {
    throw std::runtime_error("encode: stream length " + std::to_string(enc.items.size()) +
                             " exceeds max_seq_len " + std::to_string(max_seq_len));
  }
  return enc;
}

// ===== serialization =====

namespace {

json item_to_json(const EpisodeItem& item) {
  json j;
  if (item.is_vec()) {
    j["v"] = item.vec;
  } else {
    j["t"] = item.tokens;
  }
  return j;
}

EpisodeItem item_from_json(const json& j) {
  if (j.contains("v")) return EpisodeItem::of_vec(j.at("v").get<std::vector<double>>());
  return EpisodeItem::of_tokens(j.at("t").get<std::vector<std::string>>());
}

}  // namespace

std::string episode_to_json(const Episode& episode) {
  json j;
  j["version"] = 1;
  j["challenge"] = challenge_name(episode.challenge);
  j["seed"] = episode.seed;
  json demo = json::array();
  for (const auto& [in, out] : episode.demo) {
    demo.push_back(json::array({item_to_json(in), item_to_json(out)}));
  }
  j["demo"] = std::move(demo);
  json query = json::array(), target = json::array();
  for (const auto& q : episode.query) query.push_back(item_to_json(q));
  for (const auto& t : episode.target) target.push_back(item_to_json(t));
  j["query"] = std::move(query);
  j["target"] = std::move(target);
  if (!episode.demo_task.empty()) j["demo_task"] = episode.demo_task;
  if (!episode.query_task.empty()) j["query_task"] = episode.query_task;
  json meta;
  meta["digest"] = hex64(episode.digest);
  meta["gen"] = episode.gen_config_json.empty() ? json() : json::parse(episode.gen_config_json);
  j["meta"] = std::move(meta);
  return j.dump();
}

Episode episode_from_json(const std::string& line) {
  const json j = json::parse(line);
  const int64_t version = j.at("version").get<int64_t>();
  if (version != 1) {
    throw std::runtime_error("episode: unsupported version " + std::to_string(version));
  }
  Episode ep;
  ep.challenge = challenge_from_name(j.at("challenge").get<std::string>());
  ep.seed = j.at("seed").get<uint64_t>();
  for (const auto& pair : j.at("demo")) {
    ep.demo.emplace_back(item_from_json(pair.at(0)), item_from_json(pair.at(1)));
  }
  for (const auto& q : j.at("query")) ep.query.push_back(item_from_json(q));
  for (const auto& t : j.at("target")) ep.target.push_back(item_from_json(t));
  if (j.contains("demo_task")) ep.demo_task = j.at("demo_task").get<std::vector<int64_t>>();
  if (j.contains("query_task")) ep.query_task = j.at("query_task").get<std::vector<int64_t>>();
  const json& meta = j.at("meta");
  ep.digest = std::stoull(meta.at("digest").get<std::string>(), nullptr, 16);
  if (!meta.at("gen").is_null()) ep.gen_config_json = meta.at("gen").dump();
  return ep;
}

void write_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("episodes: cannot open '" + path + "' for writing");
  for (const auto& ep : episodes) out << episode_to_json(ep) << '\n';
  if (!out) throw std::runtime_error("episodes: write failed for '" + path + "'");
}

std::vector<Episode> read_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("episodes: cannot open '" + path + "'");
  std::vector<Episode> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error("episodes: parse error at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

// ===== audit =====

namespace {

bool items_equal(const EpisodeItem& a, const EpisodeItem& b) { return a == b; }

bool episodes_equal(const Episode& a, const Episode& b) {
  if (a.challenge != b.challenge || a.demo.size() != b.demo.size() ||
      a.query.size() != b.query.size() || a.target.size() != b.target.size() ||
      a.demo_task != b.demo_task || a.query_task != b.query_task) {
    return false;
  }
  for (size_t i = 0; i < a.demo.size(); ++i) {
    if (!items_equal(a.demo[i].first, b.demo[i].first) ||
        !items_equal(a.demo[i].second, b.demo[i].second)) {
      return false;
    }
  }
  for (size_t i = 0; i < a.query.size(); ++i) {
    if (!items_equal(a.query[i], b.query[i])) return false;
  }
  for (size_t i = 0; i < a.target.size(); ++i) {
    if (!items_equal(a.target[i], b.target[i])) return false;
  }
  return true;
}

// Challenge-level consistency beyond byte equality with the regeneration.
std::string oracle_note(const Episode& ep, const EpisodeGenConfig& config) {
  if (ep.challenge == Challenge::sysgen) {
    // The definitions inside the episode pin the assignment; every target
    // must agree with the interpreter under that reconstructed assignment.
    InterpretationGrammar g;
    g.primitives = config.grammar.primitives;
    g.symbols = config.grammar.symbols;
    for (const auto& [in, out] : ep.demo) {
      if (in.tokens.size() == 1 && out.tokens.size() == 1) {
        g.assignment[in.tokens[0]] = out.tokens[0];
      }
    }
    for (size_t i = 0; i < ep.query.size(); ++i) {
      std::vector<std::string> expect;
      try {
        expect = interpret(g, ep.query[i].tokens);
      } catch (const std::exception& e) {
        return std::string("sysgen: query not derivable: ") + e.what();
      }
      if (expect != ep.target[i].tokens) {
        return "sysgen: target '" + join(ep.target[i].tokens) + "' != interpretation '" +
               join(expect) + "' of '" + join(ep.query[i].tokens) + "'";
      }
    }
  } else if (ep.challenge == Challenge::reasoning) {
    if (ep.query.size() != 1 || ep.target.size() != 1) return "reasoning: expected one query";
    std::vector<int64_t> operands;
    int64_t cur = 0;
    bool any = false;
    int64_t n_columns = 0, cur_len = 0;
    for (const auto& tok : ep.query[0].tokens) {
      if (tok == "+") {
        operands.push_back(cur);
        n_columns = std::max(n_columns, cur_len);
        cur = 0;
        cur_len = 0;
      } else {
        cur = cur * 10 + (tok[0] - '0');
        ++cur_len;
        any = true;
      }
    }
    if (!any) return "reasoning: empty query";
    operands.push_back(cur);
    n_columns = std::max(n_columns, cur_len);
    std::vector<std::string> expect;
    if (!config.reasoning.answer_only) {
      expect = reasoning_trace(operands, n_columns);
      expect.push_back("=");
    }
    const auto answer = reasoning_answer(operands);
    expect.insert(expect.end(), answer.begin(), answer.end());
    if (expect != ep.target[0].tokens) {
      return "reasoning: target '" + join(ep.target[0].tokens) + "' != recomputed '" +
             join(expect) + "'";
    }
  } else {
    // Classification: every target label must be bound to some demo pair.
    for (const auto& t : ep.target) {
      bool seen = false;
      for (const auto& [in, out] : ep.demo) seen = seen || out.tokens == t.tokens;
      if (!seen) return "classification: target label absent from demos";
    }
  }
  return {};
}

}  // namespace

AuditReport audit_episodes(const std::vector<Episode>& episodes) {
  AuditReport report;
  auto flag = [&report](int64_t index, const std::string& why) {
    ++report.mismatches;
    if (report.notes.size() < 10) {
      report.notes.push_back("episode " + std::to_string(index) + ": " + why);
    }
  };
  for (size_t i = 0; i < episodes.size(); ++i) {
    const Episode& ep = episodes[i];
    ++report.checked;
    if (ep.gen_config_json.empty()) {
      flag(static_cast<int64_t>(i), "missing generator config");
      continue;
    }
    if (fnv1a64(ep.gen_config_json) != ep.digest) {
      flag(static_cast<int64_t>(i), "digest does not match generator config");
      continue;
    }
    EpisodeGenConfig config;
    try {
      config = EpisodeGenConfig::from_json(ep.gen_config_json);
    } catch (const std::exception& e) {
      flag(static_cast<int64_t>(i), std::string("bad generator config: ") + e.what());
      continue;
    }
    Episode regen;
    try {
      regen = generate_episode(config, ep.seed);
    } catch (const std::exception& e) {
      flag(static_cast<int64_t>(i), std::string("regeneration failed: ") + e.what());
      continue;
    }
    if (!episodes_equal(ep, regen)) {
      flag(static_cast<int64_t>(i), "regenerated episode differs");
      continue;
    }
    const std::string note = oracle_note(ep, config);
    if (!note.empty()) flag(static_cast<int64_t>(i), note);
  }
  return report;
}

}  // namespace msl
