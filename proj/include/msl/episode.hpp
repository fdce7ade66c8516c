#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msl/model.hpp"
#include "msl/synthetic.hpp"

namespace msl {

enum class Challenge { sysgen, continual, fewshot, reasoning };

std::string challenge_name(Challenge c);
Challenge challenge_from_name(const std::string& name);

// ===== episode data =====

// One side of a demo pair, a query, or a target: a token run or one vector.
struct EpisodeItem {
  std::vector<std::string> tokens;
  std::vector<double> vec;

  bool is_vec() const { return !vec.empty(); }
  static EpisodeItem of_tokens(std::vector<std::string> t);
  static EpisodeItem of_vec(std::vector<double> v);
  bool operator==(const EpisodeItem&) const = default;
};

struct Episode {
  Challenge challenge = Challenge::sysgen;
  std::vector<std::pair<EpisodeItem, EpisodeItem>> demo;
  std::vector<EpisodeItem> query;
  std::vector<EpisodeItem> target;       // positional with query
  std::vector<int64_t> demo_task;        // continual only, task per demo pair
  std::vector<int64_t> query_task;       // continual only, task per query
  uint64_t seed = 0;
  std::string gen_config_json;           // canonical generator config
  uint64_t digest = 0;                   // fnv1a64(gen_config_json)
};

// ===== compositional grammar =====

struct GrammarConfig {
  std::vector<std::string> primitives{"jump", "skip", "walk", "look", "run", "turn"};
  std::vector<std::string> symbols{"A", "B", "C", "D", "E", "F"};
  int64_t n_demo_compositions = 4;
  int64_t n_queries = 2;
  int64_t n_bare_queries = 0;  // train-only bare-primitive lookups, asked before the compositions
  bool shuffle_definitions = true;  // false pins the definition block to primitive order
  int64_t holdout_primitive = 0;  // index whose compositions are never demoed
  std::optional<uint64_t> fixed_assignment_seed;  // control: same map each episode

  void validate() const;
};

// A per-episode binding of primitive words to output symbols, plus the fixed
// modifier set {twice, thrice, and}. Modifiers bind tighter than 'and'.
struct InterpretationGrammar {
  std::vector<std::string> primitives;
  std::vector<std::string> symbols;
  std::map<std::string, std::string> assignment;  // bijection
};

InterpretationGrammar make_grammar(const GrammarConfig& config, uint64_t assignment_seed);

// Innermost-first rewrite of a command to its symbol sequence.
// Throws std::runtime_error on anything outside the grammar.
std::vector<std::string> interpret(const InterpretationGrammar& grammar,
                                   const std::vector<std::string>& command);

// All commands: bare primitives, modified phrases, and conjunctions of two
// phrases. compositional_commands() excludes the bare primitives.
std::vector<std::vector<std::string>> all_commands(const GrammarConfig& config);
std::vector<std::vector<std::string>> compositional_commands(const GrammarConfig& config);
bool mentions_primitive(const std::vector<std::string>& command, const std::string& prim);

// ===== challenge specs =====

struct FewshotSpec {
  int64_t n_way = 5;
  int64_t k_shot = 1;
  int64_t n_query_per_class = 1;
  void validate() const;
};

struct ContinualSpec {
  int64_t n_tasks = 2;
  int64_t classes_per_task = 2;
  int64_t demos_per_class = 2;
  int64_t queries_per_task = 2;
  void validate() const;
};

struct ReasoningSpec {
  int64_t min_digits = 3;
  int64_t max_digits = 3;
  int64_t n_operands = 2;
  bool answer_only = false;   // drop the working, keep only the final answer
  int64_t schema_version = 1;
  void validate() const;
};

// Bank slice backing classification episodes; enough to rebuild the bank.
struct BankRef {
  uint64_t seed = 0;
  int64_t n_classes = 0;
  int64_t min_hamming = 16;
  double noise_rate = 0.1;
  int64_t class_lo = 0;  // half-open slice of usable class ids
  int64_t class_hi = 0;
};

std::vector<SyntheticClass> realize_bank_slice(const BankRef& ref);

// ===== top-level generator config =====

struct EpisodeGenConfig {
  Challenge challenge = Challenge::sysgen;
  bool heldout_eval = false;  // sysgen: draw queries from the withheld pool
  GrammarConfig grammar;
  FewshotSpec fewshot;
  ContinualSpec continual;
  ReasoningSpec reasoning;
  BankRef bank;  // fewshot / continual only

  std::string canonical_json() const;
  static EpisodeGenConfig from_json(const std::string& json_text);
  uint64_t digest() const;
};

Episode generate_episode(const EpisodeGenConfig& config, uint64_t seed);

// Challenge generators (generate_episode dispatches to these).
Episode gen_sysgen_episode(const GrammarConfig& config, uint64_t seed, bool heldout_eval);
Episode gen_fewshot_episode(const FewshotSpec& spec, const std::vector<SyntheticClass>& bank,
                            uint64_t seed);
Episode gen_continual_episode(const ContinualSpec& spec,
                              const std::vector<SyntheticClass>& bank, uint64_t seed);
Episode gen_reasoning_example(const ReasoningSpec& spec, uint64_t seed);

// Ablation: permute demo output labels among demo pairs, leaving targets
// untouched, so the context carries no usable class-label binding.
Episode shuffle_demo_labels(const Episode& episode, uint64_t seed);

// Column-addition working, rightmost column first: per column the sum digit
// then the carry-out digit, then "=" and the answer most-significant first.
std::vector<std::string> reasoning_trace(const std::vector<int64_t>& operands,
                                         int64_t n_columns);
std::vector<std::string> reasoning_answer(const std::vector<int64_t>& operands);

// ===== vocabulary =====

// Deterministic token table. Separator ids are fixed: 0 "->" (pair arrow),
// 1 "|" (pair boundary), 2 "?" (demo/query boundary), 3 "." (end of target),
// 4 "/" (task boundary).
class Vocab {
 public:
  static Vocab for_config(const EpisodeGenConfig& config);
  static Vocab for_sysgen(const GrammarConfig& config);
  static Vocab for_labels(int64_t n_labels);
  static Vocab for_reasoning();

  int64_t id(const std::string& token) const;  // throws on unknown token
  const std::string& token(int64_t id) const;
  bool contains(const std::string& token) const;
  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }

  int64_t arrow() const { return 0; }
  int64_t pair_sep() const { return 1; }
  int64_t query_sep() const { return 2; }
  int64_t end_of_target() const { return 3; }
  int64_t task_sep() const { return 4; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int64_t> index_;
  void push(const std::string& token);
};

// ===== episode encoding =====

// Layout (one position per entry):
//   demo pair:   input items, "->", output tokens, "|"
//                ("/" precedes a pair that starts a new task block)
//   then "?", then per query: input items, "->", target tokens, "."
// The mask is true exactly on the target slots: the target tokens and the
// "." that ends each slot. supervision[i] repeats the token id expected at
// position i wherever the mask is set.
struct EncodedEpisode {
  std::vector<StreamItem> items;
  std::vector<uint8_t> loss_mask;
  std::vector<int64_t> supervision;
  struct QuerySlot {
    int64_t answer_start = 0;  // index of the first target token
    int64_t answer_len = 0;    // target tokens, excluding the terminator
  };
  std::vector<QuerySlot> slots;
};

EncodedEpisode encode_episode(const Episode& episode, const Vocab& vocab,
                              int64_t max_seq_len);

// ===== serialization / audit =====

std::string episode_to_json(const Episode& episode);
Episode episode_from_json(const std::string& line);
void write_episodes(const std::string& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes(const std::string& path);

struct AuditReport {
  int64_t checked = 0;
  int64_t mismatches = 0;
  std::vector<std::string> notes;  // one per mismatch, capped
};

// Re-derives every episode from its recorded generator config and seed and
// cross-checks targets against the challenge oracle (grammar interpreter,
// column arithmetic, prototype labels).
AuditReport audit_episodes(const std::vector<Episode>& episodes);

}  // namespace msl
