#ifndef CARN_CORPUS_HPP
#define CARN_CORPUS_HPP

// Clip data model, synthetic episode generator and JSON Lines persistence.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace carn {

inline constexpr const char* kCorpusSchema = "carn-corpus-1";

using Tokens = std::vector<std::string>;

struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  bool valid() const;
  bool operator==(const BBox&) const = default;
};

/// Area of the intersection of two boxes (0 when disjoint).
double intersection_area(const BBox& a, const BBox& b);

struct FaceDetection {
  int face_id = 0;
  int frame_id = 0;
  BBox box;
  Eigen::VectorXd embedding;

  bool operator==(const FaceDetection& other) const;
};

struct HumanBox {
  BBox box;
  std::string word;
  bool operator==(const HumanBox&) const = default;
};

struct DetectedObject {
  std::string label;
  std::optional<std::string> attribute;
  bool operator==(const DetectedObject&) const = default;
};

struct RelationTriple {
  std::string subject;
  std::string predicate;
  std::string object;
  std::optional<BBox> subject_box;
  std::optional<BBox> object_box;
  bool operator==(const RelationTriple&) const = default;
};

struct Frame {
  int frame_id = 0;
  double time = 0;
  std::vector<FaceDetection> faces;
  std::vector<HumanBox> human_boxes;
  std::vector<DetectedObject> objects;
  std::vector<RelationTriple> triples;
  bool operator==(const Frame&) const = default;
};

struct SubtitleLine {
  std::string speaker;
  Tokens tokens;
  double t_start = 0;
  double t_end = 0;
  bool operator==(const SubtitleLine&) const = default;
};

struct QAItem {
  Tokens question;
  std::vector<Tokens> answers;  // exactly five
  int correct_index = 0;
  double ts_start = 0;
  double ts_end = 0;
  std::string kind;  // "visual", "textual" or empty
  bool operator==(const QAItem&) const = default;
};

struct Clip {
  std::string clip_id;
  std::vector<Frame> frames;
  std::vector<SubtitleLine> subtitles;
  std::vector<QAItem> qas;
  std::optional<std::map<int, std::string>> truth;

  /// End of the last frame or subtitle line, whichever is later.
  double duration() const;
  std::size_t face_count() const;
  bool operator==(const Clip&) const = default;
};

struct GenConfig {
  int k_principals = 4;
  int n_extras = 2;
  int n_clips = 200;
  int frames_per_clip = 12;
  int d_f = 64;
  double noise_sigma = 0.1;
  double cooccur_rho = 0.9;
  double fps = 1.0;
  int qas_per_clip = 21;
  /// Distractors drawn from other triples in the clip before topping up
  /// from the vocabulary.
  int in_clip_distractors = 4;
  std::vector<std::string> principal_names = {"Ted",    "Lily",  "Marshall", "Robin",
                                              "Barney", "Penny", "Leonard",  "Sheldon"};
  std::vector<std::string> extra_names = {"Ranjit", "Wendy", "Carl", "Patrice", "Stuart"};
  std::vector<std::string> object_vocab = {
      "bottle", "cup",   "phone",  "book",   "guitar", "umbrella", "laptop",
      "pizza",  "flower", "glass", "bag",    "hat",    "jacket",   "lamp",
      "sofa",   "chair", "table",  "window", "door",   "plate",    "ring",
      "camera", "card",  "key"};
  std::vector<std::string> attribute_vocab = {"red", "small", "wooden", "white", "black"};
  std::vector<std::string> predicate_vocab = {"holds", "wears",  "touches", "carries",
                                              "uses",  "watches", "opens",  "drinks"};
  std::vector<std::string> spatial_predicates = {"under", "near", "on", "behind"};
  std::vector<std::string> human_words = {"man",  "woman", "person", "boy",
                                          "girl", "guy",   "lady",   "people"};
  std::vector<std::string> topic_vocab = {
      "paris",  "wedding", "concert", "museum", "job",    "apartment", "car",
      "movie",  "bar",     "beach",   "party",  "hotel",  "dog",       "restaurant",
      "casino", "gym",     "library", "boat",   "school", "hospital"};
  std::vector<std::string> speech_verbs = {"loves", "visited", "hates", "bought", "lost", "missed"};
  /// Question templates; {name}, {pred} and {verb} are substituted.
  std::string visual_template = "what does {name} {pred} ?";
  std::string textual_template = "what {name} {verb} ?";
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

std::vector<Clip> generate_corpus(const GenConfig& config);

/// Latent identity prototypes used by the generator, principals first then
/// extras, in name order. Exposed for oracle tests.
std::vector<Eigen::VectorXd> character_prototypes(const GenConfig& config);
std::vector<std::string> character_names(const GenConfig& config);

void write_corpus(const std::vector<Clip>& clips, const std::filesystem::path& path);
std::vector<Clip> read_corpus(const std::filesystem::path& path);

std::string clip_to_json_line(const Clip& clip);
/// `line_no` is reported in ParseError messages.
Clip clip_from_json_line(const std::string& line, std::size_t line_no);

struct ClipView {
  Clip clip;
  /// Set when the time interval does not intersect the clip at all.
  bool out_of_range = false;
};

/// Frames and subtitle lines intersecting the QA time interval (use_ts), or
/// the whole clip.
ClipView clip_view(const Clip& clip, const QAItem& qa, bool use_ts);

}  // namespace carn

#endif  // CARN_CORPUS_HPP
