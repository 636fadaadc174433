#include "persa/task.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "persa/errors.hpp"
#include "persa/hash.hpp"

namespace persa::task {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw VocabularyError("vocabulary: unknown token '" + std::string(token) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.find(token) != ids_.end(); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw VocabularyError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(id(word));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const { return {{"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
}

std::string Vocabulary::fingerprint() const {
  std::string joined;
  for (const auto& t : tokens_) joined += t + '\n';
  return sha256_hex(joined);
}

void SyntheticSpec::validate() const {
  if (num_problems < 1 || num_bug_types < 1 || num_code_tokens < 2) {
    throw ConfigError("task: num_problems, num_bug_types must be >= 1 and num_code_tokens >= 2");
  }
  if (code_min < 2 || code_max < code_min) throw ConfigError("task: need 2 <= code_min <= code_max");
  if (buggy_fraction < 0.0 || buggy_fraction > 1.0) throw ConfigError("task: buggy_fraction outside [0, 1]");
  double total = 0.0;
  for (double w : loser_mixture) {
    if (w < 0.0) throw ConfigError("task: negative loser_mixture weight");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("task: loser_mixture sums to zero");
  const int size = 8 + (num_bug_types + 1) + num_bug_types + num_code_tokens + num_problems +
                   static_cast<int>(kFillers.size());
  if (size > kMaxVocabulary) {
    throw ConfigError("task: vocabulary of " + std::to_string(size) + " tokens exceeds " +
                      std::to_string(kMaxVocabulary));
  }
}

Vocabulary SyntheticSpec::vocabulary() const {
  validate();
  std::vector<std::string> t = {std::string(kEos),     std::string(kSep),
                                std::string(kPraise),  std::string(kDiag),
                                std::string(kFix),     std::string(kVerify),
                                std::string(kCorrect), std::string(kIncorrect)};
  for (int b = 0; b <= num_bug_types; ++b) t.push_back("b" + std::to_string(b));
  for (int e = 1; e <= num_bug_types; ++e) t.push_back("e" + std::to_string(e));
  for (int c = 1; c <= num_code_tokens; ++c) t.push_back("c" + std::to_string(c));
  for (int p = 1; p <= num_problems; ++p) t.push_back("p" + std::to_string(p));
  for (auto f : kFillers) t.emplace_back(f);
  return Vocabulary(std::move(t));
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"num_problems", num_problems},       {"num_bug_types", num_bug_types},
          {"num_code_tokens", num_code_tokens}, {"code_min", code_min},
          {"code_max", code_max},               {"buggy_fraction", buggy_fraction},
          {"loser_mixture", loser_mixture},     {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_problems = j.value("num_problems", s.num_problems);
  s.num_bug_types = j.value("num_bug_types", s.num_bug_types);
  s.num_code_tokens = j.value("num_code_tokens", s.num_code_tokens);
  s.code_min = j.value("code_min", s.code_min);
  s.code_max = j.value("code_max", s.code_max);
  s.buggy_fraction = j.value("buggy_fraction", s.buggy_fraction);
  s.loser_mixture = j.value("loser_mixture", s.loser_mixture);
  s.seed = j.value("seed", s.seed);
  return s;
}

namespace {

// Reference solutions depend only on the spec seed, so every corpus drawn from
// one spec shares the same problems.
std::vector<std::vector<int>> reference_solutions(const SyntheticSpec& spec, const Vocabulary& vocab) {
  Rng rng(derive_seed(spec.seed, 0x50524f42));
  const int c1 = vocab.id("c1");
  std::vector<std::vector<int>> refs;
  for (int p = 0; p < spec.num_problems; ++p) {
    const int len = spec.code_min + static_cast<int>(rng.below(spec.code_max - spec.code_min + 1));
    std::vector<int> code;
    for (int i = 0; i < len; ++i) code.push_back(c1 + static_cast<int>(rng.below(spec.num_code_tokens)));
    refs.push_back(std::move(code));
  }
  return refs;
}

LabeledExample draw_example(const SyntheticSpec& spec, const Vocabulary& vocab,
                            const std::vector<std::vector<int>>& refs, Rng& rng) {
  LabeledExample ex;
  ex.problem_id = 1 + static_cast<int>(rng.below(spec.num_problems));
  std::vector<int> code = refs[ex.problem_id - 1];
  const int c1 = vocab.id("c1");
  // Benign variation: one or two tokens rewritten.
  const int edits = 1 + static_cast<int>(rng.below(2));
  for (int i = 0; i < edits; ++i) {
    code[rng.below(code.size())] = c1 + static_cast<int>(rng.below(spec.num_code_tokens));
  }
  ex.buggy = rng.bernoulli(spec.buggy_fraction);
  if (ex.buggy) {
    ex.bug_type = 1 + static_cast<int>(rng.below(spec.num_bug_types));
    const std::size_t at = rng.below(code.size() + 1);
    code.insert(code.begin() + static_cast<std::ptrdiff_t>(at), vocab.id("e" + std::to_string(ex.bug_type)));
  }
  ex.prompt.push_back(vocab.id("p" + std::to_string(ex.problem_id)));
  ex.prompt.insert(ex.prompt.end(), code.begin(), code.end());
  ex.prompt.push_back(vocab.id(kSep));
  ex.reference = professor_feedback(vocab, ex.buggy, ex.bug_type);
  return ex;
}

std::vector<LabeledExample> draw_unique(const SyntheticSpec& spec, int n, std::uint64_t seed) {
  if (n < 1) throw ContractError("task: corpus size must be >= 1");
  const Vocabulary vocab = spec.vocabulary();
  const auto refs = reference_solutions(spec, vocab);
  Rng rng(derive_seed(seed, 0x44454d4f));
  std::set<std::vector<int>> seen;
  std::vector<LabeledExample> out;
  const long budget = 50L * n + 1000;
  long attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > budget) {
      throw ConfigError("task: could only draw " + std::to_string(out.size()) + " distinct prompts of " +
                        std::to_string(n) + "; vocabulary too small for the requested diversity");
    }
    LabeledExample ex = draw_example(spec, vocab, refs, rng);
    if (seen.insert(ex.prompt).second) out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

std::vector<int> professor_feedback(const Vocabulary& vocab, bool buggy, int bug_type,
                                    bool flip_judgment) {
  const bool say_buggy = buggy != flip_judgment;
  const int bug = vocab.id("b" + std::to_string(bug_type));
  return {vocab.id(kPraise), vocab.id(say_buggy ? kIncorrect : kCorrect),
          vocab.id(kDiag),   bug,
          vocab.id(kFix),    bug,
          vocab.id(kVerify), vocab.id(kEos)};
}

std::vector<int> generic_feedback(const Vocabulary& vocab, bool buggy, int bug_type, Rng& rng,
                                  bool flip_judgment) {
  const bool say_buggy = buggy != flip_judgment;
  const int bug = vocab.id("b" + std::to_string(bug_type));
  std::vector<std::string_view> markers = {kPraise, kDiag, kFix, kVerify};
  rng.shuffle(std::span(markers));
  const std::size_t keep = 1 + rng.below(3);
  std::vector<int> body;
  for (std::size_t i = 0; i < keep; ++i) {
    body.push_back(vocab.id(markers[i]));
    if (markers[i] == kDiag || markers[i] == kFix) body.push_back(bug);
  }
  const int judgment = vocab.id(say_buggy ? kIncorrect : kCorrect);
  if (rng.bernoulli(0.5)) {
    body.insert(body.begin(), judgment);
  } else {
    body.push_back(judgment);
  }
  if (rng.bernoulli(0.5)) {
    body.push_back(vocab.id(kFillers[rng.below(kFillers.size())]));
  }
  body.push_back(vocab.id(kEos));
  return body;
}

std::vector<LabeledExample> gen_demonstrations(const SyntheticSpec& spec, int n, std::uint64_t seed) {
  return draw_unique(spec, n, seed);
}

std::vector<LabeledExample> gen_generic_corpus(const SyntheticSpec& spec, int n, std::uint64_t seed) {
  const Vocabulary vocab = spec.vocabulary();
  auto examples = draw_unique(spec, n, seed);
  Rng rng(derive_seed(seed, 0x47454e));
  for (auto& ex : examples) ex.reference = generic_feedback(vocab, ex.buggy, ex.bug_type, rng);
  return examples;
}

std::vector<LabeledExample> gen_pretraining_corpus(const SyntheticSpec& spec, int n, double professor_fraction,
                                                  std::uint64_t seed) {
  if (!(professor_fraction >= 0.0 && professor_fraction <= 1.0)) {
    throw ConfigError("gen_pretraining_corpus: professor_fraction must be in [0, 1]");
  }
  const Vocabulary vocab = spec.vocabulary();
  auto examples = gen_generic_corpus(spec, n, seed);
  Rng rng(derive_seed(seed, 0x4d4958));
  for (auto& ex : examples) {
    if (rng.bernoulli(professor_fraction)) ex.reference = professor_feedback(vocab, ex.buggy, ex.bug_type);
  }
  return examples;
}

std::vector<LabeledPreference> gen_preferences(const SyntheticSpec& spec, int n, std::uint64_t seed) {
  const Vocabulary vocab = spec.vocabulary();
  auto examples = draw_unique(spec, n, derive_seed(seed, 0x50524546));
  Rng rng(derive_seed(seed, 0x4c4f5345));
  std::vector<LabeledPreference> out;
  out.reserve(examples.size());
  for (auto& ex : examples) {
    LabeledPreference pref;
    pref.chosen = ex.reference;
    pref.loser_kind = static_cast<LoserKind>(rng.categorical(spec.loser_mixture));
    switch (pref.loser_kind) {
      case LoserKind::GenericCorrect:
        pref.rejected = generic_feedback(vocab, ex.buggy, ex.bug_type, rng);
        break;
      case LoserKind::ProfessorWrong:
        pref.rejected = professor_feedback(vocab, ex.buggy, ex.bug_type, true);
        break;
      case LoserKind::GenericWrong:
        pref.rejected = generic_feedback(vocab, ex.buggy, ex.bug_type, rng, true);
        break;
    }
    pref.example = std::move(ex);
    out.push_back(std::move(pref));
  }
  return out;
}

bool oracle_style(const Vocabulary& vocab, std::span<const int> tokens) {
  const int praise = vocab.id(kPraise), diag = vocab.id(kDiag), fix = vocab.id(kFix),
            verify = vocab.id(kVerify);
  const int b0 = vocab.id("b0");
  const int b_last = vocab.id("e1") - 1;
  auto is_bug = [&](int t) { return t >= b0 && t <= b_last; };
  const std::size_t n = tokens.size();
  std::size_t first_praise = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] == praise) {
      first_praise = i;
      break;
    }
  }
  if (first_praise == n) return false;
  // Last VERIFY bounds the FIX search.
  std::size_t last_verify = n;
  for (std::size_t i = n; i > 0; --i) {
    if (tokens[i - 1] == verify) {
      last_verify = i - 1;
      break;
    }
  }
  if (last_verify == n) return false;
  for (std::size_t j = first_praise + 1; j + 1 < n; ++j) {
    if (tokens[j] != diag || !is_bug(tokens[j + 1])) continue;
    for (std::size_t k = j + 2; k + 1 < last_verify; ++k) {
      if (tokens[k] == fix && tokens[k + 1] == tokens[j + 1]) return true;
    }
  }
  return false;
}

int extract_judgment(const Vocabulary& vocab, std::span<const int> tokens) {
  const int correct = vocab.id(kCorrect), incorrect = vocab.id(kIncorrect);
  int found = -1;
  int count = 0;
  for (int t : tokens) {
    if (t == correct || t == incorrect) {
      ++count;
      found = t == incorrect ? 1 : 0;
    }
  }
  return count == 1 ? found : -1;
}

bool oracle_correct(const Vocabulary& vocab, std::span<const int> tokens, bool buggy) {
  const int j = extract_judgment(vocab, tokens);
  return j >= 0 && (j == 1) == buggy;
}

std::vector<int> strip_eos(const Vocabulary& vocab, std::span<const int> tokens) {
  std::vector<int> out(tokens.begin(), tokens.end());
  if (!out.empty() && out.back() == vocab.id(kEos)) out.pop_back();
  return out;
}

}  // namespace persa::task
