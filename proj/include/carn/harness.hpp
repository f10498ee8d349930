#ifndef CARN_HARNESS_HPP
#define CARN_HARNESS_HPP

// Joint training, evaluation under both time-stamp protocols, and the
// modality ablation grid.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "carn/corpus.hpp"
#include "carn/modality.hpp"
#include "carn/model.hpp"

namespace carn {

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled (AdamW style)
  int epochs = 10;
  double lambda = 1.0;
  double epsilon = kDefaultEpsilon;
  std::uint64_t seed = 0;
  ModalityConfig modality;
  bool use_ts = true;
  /// <= 0 selects the volume-scaled default.
  long min_count = 0;
  double max_ratio = kPaperMaxRatio;
  ModelConfig model;
  std::vector<std::string> human_words{"man", "woman", "person", "boy",
                                       "girl", "guy", "lady", "people"};
  /// Worker threads; 0 picks the hardware concurrency. Results do not depend
  /// on this value.
  int threads = 0;
  /// Fixed gradient partition of each batch; summation order is by shard.
  int shards = 8;

  void validate() const;
  std::set<std::string> human_word_set() const {
    return {human_words.begin(), human_words.end()};
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double cross_entropy = 0;
  double rkl = 0;
  double face_acc = 0;
};

struct MetricsReport {
  std::string variant;
  bool use_ts = true;
  double qa_acc = 0;
  double qa_acc_visual = 0;
  double qa_acc_textual = 0;
  double face_acc = 0;
  long items = 0;
  long correct = 0;
  long visual_items = 0;
  long visual_correct = 0;
  long textual_items = 0;
  long textual_correct = 0;
  long faces = 0;
  long faces_correct = 0;
  /// QA items whose time interval missed the clip entirely.
  long out_of_range = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<EpochStats> curve;
};

struct Checkpoint {
  Model model;
  TrainConfig train;
};

using EpochCallback = std::function<void(const EpochStats&, const Model&)>;

/// Builds the cast list and vocabulary from the corpus, then optimizes the
/// naming head and the reasoning network jointly with Adam.
Checkpoint train(const std::vector<Clip>& corpus, const TrainConfig& config,
                 const EpochCallback& on_epoch = {});

/// Top-1 QA accuracy (all, visual, textual) and face-naming accuracy
/// against the truth sidecar. Never modifies the checkpoint.
MetricsReport evaluate(const Checkpoint& checkpoint, const std::vector<Clip>& corpus,
                       bool use_ts);

/// Accuracy bookkeeping with an arbitrary answer chooser.
using AnswerChooser = std::function<int(const Clip& view, const QAItem& qa)>;
MetricsReport evaluate_with(const AnswerChooser& choose, const std::vector<Clip>& corpus,
                            bool use_ts);

/// Fraction of faces whose argmax class equals the cast label of their
/// truth name. Clips without truth are skipped.
double face_naming_accuracy(const Model& model, const std::vector<Clip>& corpus,
                            long* faces = nullptr, long* correct = nullptr);

std::string config_hash(const TrainConfig& config);

struct AblationCell {
  ModalityConfig variant;
  bool use_ts = true;
  MetricsReport metrics;
  std::filesystem::path checkpoint;
};

/// Trains and evaluates each variant under each time-stamp setting. When
/// `checkpoint_dir` is set every cell's checkpoint is written there.
std::vector<AblationCell> ablate(const std::vector<Clip>& train_corpus,
                                 const std::vector<Clip>& eval_corpus, const TrainConfig& base,
                                 const std::vector<ModalityConfig>& variants,
                                 const std::vector<bool>& ts_settings,
                                 const std::filesystem::path& checkpoint_dir = {},
                                 const std::function<void(const AblationCell&)>& on_cell = {});

/// Metrics CSV: variant,use_ts,qa_acc,qa_acc_visual,qa_acc_textual,face_acc,seed
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsReport& m);

/// One row per variant with "w/ ts" and "w/o ts" accuracy columns.
void write_ablation_table(std::ostream& out, const std::vector<AblationCell>& cells);

void write_loss_curve(std::ostream& out, const std::vector<EpochStats>& curve);

}  // namespace carn

#endif  // CARN_HARNESS_HPP
