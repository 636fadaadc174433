#pragma once

// Evaluation suite: style alignment (SAC), politeness closeness (APC),
// corpus BLEU-4, correctness accuracy (CA), preference win rate (PWR) and
// corpus diversity. All rates are fractions in [0, 1].

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "persa/audit.hpp"
#include "persa/task.hpp"

namespace persa::metrics {

using Sequence = std::vector<int>;

// ---- style classifier -----------------------------------------------------

// Logistic regression over unigram + bigram counts, followed by a monotone
// histogram-binning calibration map.
class StyleClassifier {
 public:
  struct Options {
    int epochs = 300;
    double lr = 0.5;
    double l2 = 1e-3;
    int calibration_bins = 10;
  };

  StyleClassifier() = default;
  explicit StyleClassifier(int vocab_size);

  // Full-batch gradient descent on the log-loss; labels are 0/1.
  void fit(std::span<const Sequence> sequences, std::span<const int> labels, const Options& options);
  void fit(std::span<const Sequence> sequences, std::span<const int> labels) { fit(sequences, labels, Options{}); }
  // Fits bin frequencies on held-out data, then pools adjacent violators so
  // the map is non-decreasing in the raw score.
  void calibrate(std::span<const Sequence> sequences, std::span<const int> labels, int bins = 10);

  double raw_score(std::span<const int> sequence) const;
  // Calibrated posterior for the professor label; raw score if uncalibrated.
  double posterior(std::span<const int> sequence) const;

  bool calibrated() const { return !calibration_.empty(); }
  const std::vector<double>& calibration_map() const { return calibration_; }
  int vocab_size() const { return vocab_size_; }

 private:
  std::vector<std::pair<std::size_t, double>> features(std::span<const int> sequence) const;

  int vocab_size_ = 0;
  std::vector<double> weights_;
  double bias_ = 0.0;
  std::vector<double> calibration_;
};

struct ClassifierReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double ece = 0.0;
};

double expected_calibration_error(std::span<const double> probabilities, std::span<const int> labels,
                                  int bins = 10);
double macro_f1(std::span<const int> predicted, std::span<const int> labels);
ClassifierReport evaluate_classifier(const StyleClassifier& classifier, std::span<const Sequence> sequences,
                                     std::span<const int> labels);

// ---- politeness -----------------------------------------------------------

// p(y) = sigmoid(sum of token weights + offset).
class PolitenessScorer {
 public:
  PolitenessScorer(std::map<int, double> weights, double offset);
  // Default lexicon over the synthetic vocabulary.
  static PolitenessScorer for_vocabulary(const task::Vocabulary& vocab);

  double score(std::span<const int> sequence) const;
  // Lexicon keyed by token string, for the vocabulary manifest.
  nlohmann::json to_json(const task::Vocabulary& vocab) const;

 private:
  std::map<int, double> weights_;
  double offset_;
};

// ---- headline metrics -----------------------------------------------------

using Posterior = std::function<double(std::span<const int>)>;

// Mean posterior. Throws ContractError on an empty response set.
double sac(std::span<const Sequence> responses, const Posterior& posterior);
double sac(std::span<const Sequence> responses, const StyleClassifier& classifier);

// Mean of 1 - |p(response) - p(reference)|.
double apc(std::span<const Sequence> responses, std::span<const Sequence> references,
           const std::function<double(std::span<const int>)>& politeness);
double apc(std::span<const Sequence> responses, std::span<const Sequence> references,
           const PolitenessScorer& scorer);

struct BleuResult {
  double score = 0.0;
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  std::size_t empty_candidates = 0;
};

// Corpus BLEU-4 with one or more references per candidate. Clipped n-gram
// counts are pooled over the corpus; an order with zero matches uses
// p_n = 1 / (total_n + 1). The reference length per candidate is the closest
// reference length (shorter wins ties). An empty corpus length gives 0.
BleuResult corpus_bleu(std::span<const Sequence> candidates, std::span<const std::vector<Sequence>> references);
// Single-reference convenience.
double bleu4(std::span<const Sequence> candidates, std::span<const Sequence> references);

struct CaResult {
  double accuracy = 0.0;
  std::size_t extraction_failures = 0;
};

// A response with zero or several judgment tokens counts as wrong and is
// tallied as an extraction failure.
CaResult ca(const task::Vocabulary& vocab, std::span<const Sequence> responses, const std::vector<bool>& buggy);

// Fraction of i with a[i] > b[i]; exact ties count 0.5.
double pwr(std::span<const double> rewards_a, std::span<const double> rewards_b);

// Mean sentence BLEU-4 of each sequence against all the others; absent for
// fewer than two sequences.
std::optional<double> self_bleu(std::span<const Sequence> corpus);
// Unique n-grams / total n-grams over the corpus; 0 when there are none.
double distinct_n(std::span<const Sequence> corpus, int n = 2);

// ---- report ---------------------------------------------------------------

struct MetricsReport {
  double sac = 0.0;
  double apc = 0.0;
  double bleu4 = 0.0;
  double ca = 0.0;
  std::optional<double> pwr;

  double style_rate = 0.0;  // oracle_style over the responses
  std::size_t ca_extraction_failures = 0;
  std::size_t empty_responses = 0;
  std::size_t responses = 0;
  std::optional<audit::AuditBlock> audit;

  static std::string csv_header();
  // SAC, APC, BLEU-4, CA, PWR as fractions; PWR empty when absent.
  std::string csv_row() const;
  // Percentages with one decimal; PWR "--" when absent.
  std::string markdown() const;
  nlohmann::json to_json() const;
};

std::string format_percent(double fraction);

}  // namespace persa::metrics
