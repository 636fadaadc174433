#pragma once

// Closed-vocabulary stand-in for an instructor feedback corpus.
//
// A prompt is  p<k> c.. c.. [e<j>] c.. =>  : a problem id, the tokens of a
// student submission and a separator. A buggy submission carries exactly one
// error-signature token e<j>, which fixes its bug type b<j>; a clean one has
// none (bug type b0).
//
// Professor feedback always reads
//     PRAISE <judgment> DIAG b<j> FIX b<j> VERIFY <eos>
// while generic feedback is a short unordered subset (one to three) of the
// markers. Both styles and the correctness of the judgment are decidable by
// the oracles below.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "persa/rng.hpp"

namespace persa::task {

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> tokens);

  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Whitespace tokenization; unknown words throw VocabularyError.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  // Order-sensitive hash of the token list.
  std::string fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
};

// Fixed marker tokens shared by every spec.
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kSep = "=>";
inline constexpr std::string_view kPraise = "PRAISE";
inline constexpr std::string_view kDiag = "DIAG";
inline constexpr std::string_view kFix = "FIX";
inline constexpr std::string_view kVerify = "VERIFY";
inline constexpr std::string_view kCorrect = "CORRECT";
inline constexpr std::string_view kIncorrect = "INCORRECT";
inline constexpr std::array<std::string_view, 6> kFillers = {"please", "thanks", "note",
                                                             "maybe",  "just",   "obviously"};
inline constexpr int kMaxVocabulary = 64;

struct SyntheticSpec {
  int num_problems = 20;
  int num_bug_types = 6;
  int num_code_tokens = 12;
  int code_min = 6;
  int code_max = 10;
  double buggy_fraction = 0.5;
  // Loser kinds: generic+correct, professor+wrong judgment, generic+wrong.
  std::array<double, 3> loser_mixture = {0.5, 0.3, 0.2};
  std::uint64_t seed = 0;

  // Throws ConfigError (including when the vocabulary would exceed 64 tokens).
  void validate() const;
  Vocabulary vocabulary() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct LabeledExample {
  std::vector<int> prompt;
  bool buggy = false;
  int bug_type = 0;  // 0 when clean
  int problem_id = 0;
  std::vector<int> reference;  // professor feedback, ends with <eos>
};

enum class LoserKind { GenericCorrect = 0, ProfessorWrong = 1, GenericWrong = 2 };

struct LabeledPreference {
  LabeledExample example;
  std::vector<int> chosen;
  std::vector<int> rejected;
  LoserKind loser_kind = LoserKind::GenericCorrect;
};

// n examples with unique prompts; deterministic in (spec, n, seed). Throws
// ConfigError when the spec cannot supply n distinct prompts.
std::vector<LabeledExample> gen_demonstrations(const SyntheticSpec& spec, int n,
                                               std::uint64_t seed);

std::vector<LabeledPreference> gen_preferences(const SyntheticSpec& spec, int n,
                                               std::uint64_t seed);

// Examples whose `reference` is generic-style feedback with the correct
// judgment: the behaviour of an un-adapted instruction-following model.
std::vector<LabeledExample> gen_generic_corpus(const SyntheticSpec& spec, int n,
                                               std::uint64_t seed);

// Generic corpus in which each reference is replaced by professor feedback
// with probability `professor_fraction`. Used to pretrain the base policy.
std::vector<LabeledExample> gen_pretraining_corpus(const SyntheticSpec& spec, int n,
                                                   double professor_fraction, std::uint64_t seed);

std::vector<int> professor_feedback(const Vocabulary& vocab, bool buggy, int bug_type,
                                    bool flip_judgment = false);
std::vector<int> generic_feedback(const Vocabulary& vocab, bool buggy, int bug_type,
                                  Rng& rng, bool flip_judgment = false);

// PRAISE, DIAG x, FIX y, VERIFY appear in that order with x == y a bug token.
bool oracle_style(const Vocabulary& vocab, std::span<const int> tokens);
// Exactly one judgment token, and it matches the label.
bool oracle_correct(const Vocabulary& vocab, std::span<const int> tokens, bool buggy);

// Judgment extracted from feedback: +1 INCORRECT (buggy), 0 CORRECT, -1 when
// absent or ambiguous.
int extract_judgment(const Vocabulary& vocab, std::span<const int> tokens);

// Drops a trailing <eos>, if any.
std::vector<int> strip_eos(const Vocabulary& vocab, std::span<const int> tokens);

}  // namespace persa::task
