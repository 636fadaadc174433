#include "persa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "persa/errors.hpp"

namespace persa::metrics {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_labels(std::size_t n, std::span<const int> labels, const char* where) {
  if (n != labels.size()) throw DimensionError(std::string(where) + ": sequences and labels differ in length");
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError(std::string(where) + ": labels must be 0 or 1");
  }
}

}  // namespace

// ---- style classifier -----------------------------------------------------

StyleClassifier::StyleClassifier(int vocab_size)
    : vocab_size_(vocab_size),
      weights_(static_cast<std::size_t>(vocab_size) * (1 + static_cast<std::size_t>(vocab_size)), 0.0) {
  if (vocab_size < 1) throw ContractError("StyleClassifier: vocab_size must be positive");
}

std::vector<std::pair<std::size_t, double>> StyleClassifier::features(std::span<const int> sequence) const {
  const auto v = static_cast<std::size_t>(vocab_size_);
  std::vector<std::size_t> idx;
  idx.reserve(sequence.size() * 2);
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    const int t = sequence[i];
    if (t < 0 || t >= vocab_size_) throw VocabularyError("StyleClassifier: token id " + std::to_string(t) + " out of range");
    idx.push_back(static_cast<std::size_t>(t));
    if (i + 1 < sequence.size()) {
      const int u = sequence[i + 1];
      if (u < 0 || u >= vocab_size_) throw VocabularyError("StyleClassifier: token id " + std::to_string(u) + " out of range");
      idx.push_back(v + static_cast<std::size_t>(t) * v + static_cast<std::size_t>(u));
    }
  }
  std::sort(idx.begin(), idx.end());
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i : idx) {
    if (!out.empty() && out.back().first == i) {
      out.back().second += 1.0;
    } else {
      out.emplace_back(i, 1.0);
    }
  }
  return out;
}

void StyleClassifier::fit(std::span<const Sequence> sequences, std::span<const int> labels, const Options& options) {
  check_labels(sequences.size(), labels, "StyleClassifier::fit");
  if (sequences.empty()) throw ContractError("StyleClassifier::fit: empty training set");
  if (weights_.empty()) throw ContractError("StyleClassifier::fit: classifier has no vocabulary");
  std::vector<std::vector<std::pair<std::size_t, double>>> x;
  x.reserve(sequences.size());
  for (const auto& s : sequences) x.push_back(features(s));
  std::fill(weights_.begin(), weights_.end(), 0.0);
  bias_ = 0.0;
  calibration_.clear();
  const double n = static_cast<double>(sequences.size());
  std::vector<double> grad(weights_.size());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = bias_;
      for (const auto& [f, c] : x[i]) z += weights_[f] * c;
      const double err = sigmoid(z) - labels[i];
      for (const auto& [f, c] : x[i]) grad[f] += err * c;
      grad_b += err;
    }
    for (std::size_t f = 0; f < weights_.size(); ++f) {
      weights_[f] -= options.lr * (grad[f] / n + options.l2 * weights_[f]);
    }
    bias_ -= options.lr * grad_b / n;
  }
}

void StyleClassifier::calibrate(std::span<const Sequence> sequences, std::span<const int> labels, int bins) {
  check_labels(sequences.size(), labels, "StyleClassifier::calibrate");
  if (bins < 1) throw ContractError("StyleClassifier::calibrate: bins must be >= 1");
  if (sequences.empty()) throw ContractError("StyleClassifier::calibrate: empty calibration set");
  calibration_.clear();
  std::vector<double> count(bins, 0.0), positive(bins, 0.0);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const double s = raw_score(sequences[i]);
    const int b = std::min(bins - 1, static_cast<int>(s * bins));
    count[b] += 1.0;
    positive[b] += labels[i];
  }
  // Pool adjacent violators over the non-empty bins.
  struct Block {
    double sum, weight;
    int first, last;
  };
  std::vector<Block> blocks;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0.0) continue;
    blocks.push_back({positive[b], count[b], b, b});
    while (blocks.size() > 1) {
      Block& hi = blocks[blocks.size() - 1];
      Block& lo = blocks[blocks.size() - 2];
      if (lo.sum / lo.weight <= hi.sum / hi.weight) break;
      lo.sum += hi.sum;
      lo.weight += hi.weight;
      lo.last = hi.last;
      blocks.pop_back();
    }
  }
  std::vector<double> map(bins, -1.0);
  for (const auto& blk : blocks) {
    for (int b = blk.first; b <= blk.last; ++b) map[b] = blk.sum / blk.weight;
  }
  // Empty bins take the value of the nearest non-empty bin below (or above,
  // for leading empties), which keeps the map monotone.
  double carry = -1.0;
  for (int b = 0; b < bins; ++b) {
    if (map[b] >= 0.0) {
      carry = map[b];
    } else if (carry >= 0.0) {
      map[b] = carry;
    }
  }
  for (int b = bins - 1; b >= 0; --b) {
    if (map[b] >= 0.0) {
      carry = map[b];
    } else {
      map[b] = carry;
    }
  }
  calibration_ = std::move(map);
}

double StyleClassifier::raw_score(std::span<const int> sequence) const {
  if (weights_.empty()) throw ContractError("StyleClassifier: not fitted");
  double z = bias_;
  for (const auto& [f, c] : features(sequence)) z += weights_[f] * c;
  return sigmoid(z);
}

double StyleClassifier::posterior(std::span<const int> sequence) const {
  const double s = raw_score(sequence);
  if (calibration_.empty()) return s;
  const int bins = static_cast<int>(calibration_.size());
  return calibration_[std::min(bins - 1, static_cast<int>(s * bins))];
}

double expected_calibration_error(std::span<const double> probabilities, std::span<const int> labels, int bins) {
  check_labels(probabilities.size(), labels, "expected_calibration_error");
  if (bins < 1) throw ContractError("expected_calibration_error: bins must be >= 1");
  if (probabilities.empty()) throw ContractError("expected_calibration_error: empty input");
  std::vector<double> n(bins, 0.0), conf(bins, 0.0), acc(bins, 0.0);
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("expected_calibration_error: probability outside [0, 1]");
    const int b = std::min(bins - 1, static_cast<int>(p * bins));
    n[b] += 1.0;
    conf[b] += p;
    acc[b] += labels[i];
  }
  double ece = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (n[b] > 0) ece += std::abs(acc[b] - conf[b]);
  }
  return ece / static_cast<double>(probabilities.size());
}

double macro_f1(std::span<const int> predicted, std::span<const int> labels) {
  check_labels(predicted.size(), labels, "macro_f1");
  double total = 0.0;
  for (int cls : {0, 1}) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      tp += predicted[i] == cls && labels[i] == cls;
      fp += predicted[i] == cls && labels[i] != cls;
      fn += predicted[i] != cls && labels[i] == cls;
    }
    total += (tp + fp + fn == 0) ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / 2.0;
}

ClassifierReport evaluate_classifier(const StyleClassifier& classifier, std::span<const Sequence> sequences,
                                     std::span<const int> labels) {
  check_labels(sequences.size(), labels, "evaluate_classifier");
  if (sequences.empty()) throw ContractError("evaluate_classifier: empty input");
  std::vector<double> probs;
  std::vector<int> pred;
  std::size_t right = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    probs.push_back(classifier.posterior(sequences[i]));
    pred.push_back(probs.back() >= 0.5 ? 1 : 0);
    right += pred.back() == labels[i];
  }
  ClassifierReport r;
  r.accuracy = static_cast<double>(right) / static_cast<double>(sequences.size());
  r.macro_f1 = macro_f1(pred, labels);
  r.ece = expected_calibration_error(probs, labels);
  return r;
}

// ---- politeness -----------------------------------------------------------

PolitenessScorer::PolitenessScorer(std::map<int, double> weights, double offset)
    : weights_(std::move(weights)), offset_(offset) {}

PolitenessScorer PolitenessScorer::for_vocabulary(const task::Vocabulary& vocab) {
  const std::pair<std::string_view, double> lexicon[] = {
      {task::kPraise, 1.0}, {task::kVerify, 0.5}, {"please", 0.8}, {"thanks", 0.8},
      {task::kFix, 0.2},    {"obviously", -1.0},  {"just", -0.5},
  };
  std::map<int, double> w;
  for (const auto& [tok, weight] : lexicon) {
    if (vocab.contains(tok)) w[vocab.id(tok)] = weight;
  }
  return PolitenessScorer(std::move(w), -1.0);
}

double PolitenessScorer::score(std::span<const int> sequence) const {
  double z = offset_;
  for (int t : sequence) {
    if (auto it = weights_.find(t); it != weights_.end()) z += it->second;
  }
  return sigmoid(z);
}

nlohmann::json PolitenessScorer::to_json(const task::Vocabulary& vocab) const {
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [id, w] : weights_) weights[vocab.token(id)] = w;
  return {{"weights", weights}, {"offset", offset_}};
}

// ---- headline metrics -----------------------------------------------------

double sac(std::span<const Sequence> responses, const Posterior& posterior) {
  if (responses.empty()) throw ContractError("sac: no responses");
  double total = 0.0;
  for (const auto& r : responses) total += posterior(r);
  return total / static_cast<double>(responses.size());
}

double sac(std::span<const Sequence> responses, const StyleClassifier& classifier) {
  return sac(responses, [&](std::span<const int> s) { return classifier.posterior(s); });
}

double apc(std::span<const Sequence> responses, std::span<const Sequence> references,
           const std::function<double(std::span<const int>)>& politeness) {
  if (responses.size() != references.size()) throw DimensionError("apc: responses and references differ in length");
  if (responses.empty()) throw ContractError("apc: no responses");
  double total = 0.0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    total += 1.0 - std::abs(politeness(responses[i]) - politeness(references[i]));
  }
  return total / static_cast<double>(responses.size());
}

double apc(std::span<const Sequence> responses, std::span<const Sequence> references, const PolitenessScorer& scorer) {
  return apc(responses, references, [&](std::span<const int> s) { return scorer.score(s); });
}

namespace {

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts ngram_counts(std::span<const int> s, int n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<int>(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

BleuResult corpus_bleu(std::span<const Sequence> candidates, std::span<const std::vector<Sequence>> references) {
  if (candidates.size() != references.size()) {
    throw DimensionError("corpus_bleu: candidates and references differ in length");
  }
  BleuResult r;
  std::array<double, 4> matched{}, total{};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw ContractError("corpus_bleu: candidate " + std::to_string(i) + " has no reference");
    if (cand.empty()) ++r.empty_candidates;
    r.candidate_length += cand.size();
    std::size_t best = refs[0].size();
    for (const auto& ref : refs) {
      const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    r.reference_length += best;
    for (int n = 1; n <= 4; ++n) {
      const NgramCounts c = ngram_counts(cand, n);
      NgramCounts max_ref;
      for (const auto& ref : refs) {
        for (const auto& [g, k] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], k);
      }
      for (const auto& [g, k] : c) {
        total[n - 1] += k;
        if (auto it = max_ref.find(g); it != max_ref.end()) matched[n - 1] += std::min(k, it->second);
      }
    }
  }
  if (r.candidate_length == 0) return r;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    r.precisions[n] = matched[n] > 0 ? matched[n] / total[n] : 1.0 / (total[n] + 1.0);
    log_sum += std::log(r.precisions[n]);
  }
  const double c = static_cast<double>(r.candidate_length);
  const double ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c > ref_len ? 1.0 : std::exp(1.0 - ref_len / c);
  r.score = r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

double bleu4(std::span<const Sequence> candidates, std::span<const Sequence> references) {
  std::vector<std::vector<Sequence>> refs;
  refs.reserve(references.size());
  for (const auto& ref : references) refs.push_back({ref});
  return corpus_bleu(candidates, refs).score;
}

CaResult ca(const task::Vocabulary& vocab, std::span<const Sequence> responses, const std::vector<bool>& buggy) {
  if (responses.size() != buggy.size()) throw DimensionError("ca: responses and labels differ in length");
  if (responses.empty()) throw ContractError("ca: no responses");
  CaResult r;
  std::size_t right = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const int j = task::extract_judgment(vocab, responses[i]);
    if (j < 0) {
      ++r.extraction_failures;
    } else if ((j == 1) == buggy[i]) {
      ++right;
    }
  }
  r.accuracy = static_cast<double>(right) / static_cast<double>(responses.size());
  return r;
}

double pwr(std::span<const double> rewards_a, std::span<const double> rewards_b) {
  if (rewards_a.size() != rewards_b.size()) throw DimensionError("pwr: reward lists differ in length");
  if (rewards_a.empty()) throw ContractError("pwr: no comparisons");
  double wins = 0.0;
  for (std::size_t i = 0; i < rewards_a.size(); ++i) {
    if (rewards_a[i] > rewards_b[i]) {
      wins += 1.0;
    } else if (rewards_a[i] == rewards_b[i]) {
      wins += 0.5;
    }
  }
  return wins / static_cast<double>(rewards_a.size());
}

std::optional<double> self_bleu(std::span<const Sequence> corpus) {
  if (corpus.size() < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<std::vector<Sequence>> refs(1);
    for (std::size_t j = 0; j < corpus.size(); ++j) {
      if (j != i) refs[0].push_back(corpus[j]);
    }
    total += corpus_bleu(std::span<const Sequence>(&corpus[i], 1), refs).score;
  }
  return total / static_cast<double>(corpus.size());
}

double distinct_n(std::span<const Sequence> corpus, int n) {
  if (n < 1) throw ContractError("distinct_n: n must be >= 1");
  std::set<std::vector<int>> unique;
  std::size_t total = 0;
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      unique.emplace(s.begin() + i, s.begin() + i + n);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

// ---- report ---------------------------------------------------------------

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

std::string MetricsReport::csv_header() { return "SAC,APC,BLEU-4,CA,PWR"; }

std::string MetricsReport::csv_row() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,", sac, apc, bleu4, ca);
  std::string out = buf;
  if (pwr) {
    std::snprintf(buf, sizeof buf, "%.6f", *pwr);
    out += buf;
  }
  return out;
}

std::string MetricsReport::markdown() const {
  return "| SAC | APC | BLEU-4 | CA | PWR |\n|---|---|---|---|---|\n| " + format_percent(sac) + " | " +
         format_percent(apc) + " | " + format_percent(bleu4) + " | " + format_percent(ca) + " | " +
         (pwr ? format_percent(*pwr) : std::string("--")) + " |\n";
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"sac", sac},
                      {"apc", apc},
                      {"bleu4", bleu4},
                      {"ca", ca},
                      {"style_rate", style_rate},
                      {"ca_extraction_failures", ca_extraction_failures},
                      {"empty_responses", empty_responses},
                      {"responses", responses}};
  j["pwr"] = pwr ? nlohmann::json(*pwr) : nlohmann::json(nullptr);
  if (audit) j["audit"] = audit->to_json();
  return j;
}

}  // namespace persa::metrics
