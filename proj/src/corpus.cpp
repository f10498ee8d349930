#include "carn/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "carn/errors.hpp"

namespace carn {

bool BBox::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) &&
         x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1;
}

double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

bool FaceDetection::operator==(const FaceDetection& other) const {
  return face_id == other.face_id && frame_id == other.frame_id && box == other.box &&
         embedding.size() == other.embedding.size() && embedding == other.embedding;
}

double Clip::duration() const {
  double d = 0;
  for (const auto& f : frames) d = std::max(d, f.time);
  for (const auto& s : subtitles) d = std::max(d, s.t_end);
  return d;
}

std::size_t Clip::face_count() const {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.faces.size();
  return n;
}

void GenConfig::validate() const {
  if (k_principals < 1) throw ConfigError("k_principals", "must be at least 1");
  if (k_principals > static_cast<int>(principal_names.size())) {
    throw ConfigError("k_principals", "exceeds the number of principal_names");
  }
  if (n_extras < 0 || n_extras > static_cast<int>(extra_names.size())) {
    throw ConfigError("n_extras", "must be between 0 and the number of extra_names");
  }
  if (n_clips < 1) throw ConfigError("n_clips", "must be at least 1");
  if (frames_per_clip < 2) throw ConfigError("frames_per_clip", "must be at least 2");
  if (d_f < 1) throw ConfigError("d_f", "must be at least 1");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) {
    throw ConfigError("noise_sigma", "must be finite and non-negative");
  }
  if (!(cooccur_rho >= 0 && cooccur_rho <= 1)) {
    throw ConfigError("cooccur_rho", "must lie in [0, 1]");
  }
  if (!(fps > 0) || !std::isfinite(fps)) throw ConfigError("fps", "must be positive");
  if (qas_per_clip < 0) throw ConfigError("qas_per_clip", "must be non-negative");
  if (in_clip_distractors < 0 || in_clip_distractors > 4) {
    throw ConfigError("in_clip_distractors", "must lie in [0, 4]");
  }
  if (object_vocab.size() < 12) throw ConfigError("object_vocab", "needs at least 12 objects");
  if (predicate_vocab.size() < 2) throw ConfigError("predicate_vocab", "needs at least 2");
  if (spatial_predicates.empty()) throw ConfigError("spatial_predicates", "must not be empty");
  if (human_words.empty()) throw ConfigError("human_words", "must not be empty");
  if (topic_vocab.size() < 5) throw ConfigError("topic_vocab", "needs at least 5 topics");
  if (speech_verbs.empty()) throw ConfigError("speech_verbs", "must not be empty");
  if (visual_template.find("{name}") == std::string::npos) {
    throw ConfigError("visual_template", "must contain {name}");
  }
  if (textual_template.find("{name}") == std::string::npos) {
    throw ConfigError("textual_template", "must contain {name}");
  }
}

std::vector<std::string> character_names(const GenConfig& config) {
  std::vector<std::string> names(config.principal_names.begin(),
                                 config.principal_names.begin() + config.k_principals);
  names.insert(names.end(), config.extra_names.begin(),
               config.extra_names.begin() + config.n_extras);
  return names;
}

std::vector<Eigen::VectorXd> character_prototypes(const GenConfig& config) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                    static_cast<std::uint32_t>(config.seed >> 32), 0x5eedu, 0xfaceu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = config.k_principals + config.n_extras;
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd v(config.d_f);
    for (int d = 0; d < config.d_f; ++d) v(d) = gauss(rng);
    out.push_back(v.normalized());
  }
  return out;
}

namespace {

struct Character {
  int index = 0;  // into character_names / prototypes
  std::string name;
  std::string word;
  bool principal = true;
};

struct Action {
  std::string predicate;
  std::string object;
};

class ClipBuilder {
 public:
  ClipBuilder(const GenConfig& config, const std::vector<Eigen::VectorXd>& protos,
              int clip_index)
      : cfg_(config), protos_(protos), rng_(make_seed(config.seed, clip_index)) {
    clip_.clip_id = "clip_" + std::to_string(clip_index);
  }

  Clip build() {
    cast_members();
    assign_actions();
    build_timeline();
    build_questions();
    return std::move(clip_);
  }

 private:
  static std::mt19937_64 make_seed(std::uint64_t seed, int clip_index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(clip_index), 0xc11bu};
    return std::mt19937_64(seq);
  }

  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }

  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(uniform(0, static_cast<int>(v.size()) - 1))];
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own draws keeps output independent of the
    // standard library's shuffle implementation.
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(uniform(0, static_cast<int>(i) - 1))]);
    }
  }

  Character make_character(int index, bool principal) {
    const auto names = character_names(cfg_);
    return Character{index, names[index],
                     cfg_.human_words[static_cast<std::size_t>(index) % cfg_.human_words.size()],
                     principal};
  }

  void cast_members() {
    std::vector<int> order(cfg_.k_principals);
    std::iota(order.begin(), order.end(), 0);
    shuffle(order);
    const int m = std::min(cfg_.k_principals, uniform(2, 3));
    for (int i = 0; i < m; ++i) principals_.push_back(make_character(order[i], true));
    if (cfg_.n_extras > 0 && chance(0.35)) {
      extra_ = make_character(cfg_.k_principals + uniform(0, cfg_.n_extras - 1), false);
    }
  }

  void assign_actions() {
    std::vector<std::string> objects = cfg_.object_vocab;
    shuffle(objects);
    std::size_t next = 0;
    for (std::size_t c = 0; c < principals_.size(); ++c) {
      std::vector<std::string> preds = cfg_.predicate_vocab;
      shuffle(preds);
      actions_.push_back({Action{preds[0], objects[next]}, Action{preds[1], objects[next + 1]}});
      next += 2;
    }
    background_.assign(objects.begin() + static_cast<std::ptrdiff_t>(next), objects.end());
  }

  FaceDetection make_face(const Character& who, int frame_id, const BBox& box) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd e = protos_[who.index];
    for (int d = 0; d < e.size(); ++d) e(d) += cfg_.noise_sigma * gauss(rng_);
    FaceDetection f;
    f.face_id = next_face_id_++;
    f.frame_id = frame_id;
    f.box = box;
    f.embedding = e.normalized();
    truth_[f.face_id] = who.name;
    return f;
  }

  void build_timeline() {
    const int frames = cfg_.frames_per_clip;
    const int lines = (frames + 1) / 2;
    std::vector<std::string> topics = cfg_.topic_vocab;
    shuffle(topics);

    for (int j = 0; j < lines; ++j) {
      // Speaker of line j: usually a principal on screen, sometimes the extra.
      const Character* speaker = nullptr;
      if (extra_ && chance(0.12)) {
        speaker = &*extra_;
      } else {
        speaker = &principals_[static_cast<std::size_t>(
            uniform(0, static_cast<int>(principals_.size()) - 1))];
      }
      SubtitleLine line;
      line.speaker = speaker->name;
      line.tokens = {"i", pick(cfg_.speech_verbs), "the",
                     topics[static_cast<std::size_t>(j) % topics.size()]};
      line.t_start = (2 * j) / cfg_.fps;
      line.t_end = (2 * j + 1.5) / cfg_.fps;
      clip_.subtitles.push_back(line);

      for (int f = 2 * j; f < std::min(frames, 2 * j + 2); ++f) {
        build_frame(f, *speaker);
      }
    }
    clip_.truth = truth_;
  }

  void build_frame(int frame_id, const Character& speaker) {
    Frame frame;
    frame.frame_id = frame_id;
    frame.time = frame_id / cfg_.fps;
    const int phase = frame_id < cfg_.frames_per_clip / 2 ? 0 : 1;

    std::vector<const Character*> visible;
    for (const auto& c : principals_) {
      const double p = c.index == speaker.index ? cfg_.cooccur_rho : 0.35;
      if (chance(p)) visible.push_back(&c);
    }
    if (extra_) {
      const double p = extra_->index == speaker.index ? cfg_.cooccur_rho : 0.2;
      if (chance(p)) visible.push_back(&*extra_);
    }
    shuffle(visible);

    const double slot = 640.0 / std::max<std::size_t>(3, visible.size());
    for (std::size_t s = 0; s < visible.size(); ++s) {
      const Character& who = *visible[s];
      const double x = std::round(s * slot + uniform(0, 8));
      const double w = std::round(slot - 24 - uniform(0, 8));
      const BBox human{x, static_cast<double>(30 + uniform(0, 10)), x + w, 350};
      const double fx = std::round(x + w / 2 - 22 + uniform(-4, 4));
      const double fy = static_cast<double>(45 + uniform(0, 6));
      const BBox face{fx, fy, fx + 44, fy + 52};
      frame.faces.push_back(make_face(who, frame_id, face));
      frame.human_boxes.push_back(HumanBox{human, who.word});

      if (who.principal) {
        const auto c = static_cast<std::size_t>(
            std::find_if(principals_.begin(), principals_.end(),
                         [&](const Character& p) { return p.index == who.index; }) -
            principals_.begin());
        const Action& act = actions_[c][static_cast<std::size_t>(phase)];
        add_object(frame, act.object);
        if (chance(0.85)) {
          frame.triples.push_back(RelationTriple{who.word, act.predicate, act.object, human, {}});
          occurrences_[{c, phase}].push_back(frame.time);
        }
      } else if (chance(0.5)) {
        const std::string& obj = pick(background_);
        add_object(frame, obj);
        frame.triples.push_back(
            RelationTriple{who.word, pick(cfg_.predicate_vocab), obj, human, {}});
      }
    }

    const int n_bg = uniform(1, 2);
    std::vector<std::string> bg;
    for (int i = 0; i < n_bg; ++i) {
      bg.push_back(pick(background_));
      add_object(frame, bg.back());
    }
    if (bg.size() == 2 && bg[0] != bg[1] && chance(0.3)) {
      frame.triples.push_back(
          RelationTriple{bg[0], pick(cfg_.spatial_predicates), bg[1], {}, {}});
    }
    clip_.frames.push_back(std::move(frame));
  }

  void add_object(Frame& frame, const std::string& label) {
    for (const auto& o : frame.objects) {
      if (o.label == label) return;
    }
    DetectedObject obj{label, {}};
    if (!cfg_.attribute_vocab.empty() && chance(0.3)) obj.attribute = pick(cfg_.attribute_vocab);
    frame.objects.push_back(std::move(obj));
  }

  static Tokens fill_template(const std::string& pattern, const std::string& name,
                              const std::string& pred, const std::string& verb) {
    Tokens out;
    std::istringstream in(pattern);
    std::string w;
    while (in >> w) {
      if (w == "{name}") {
        out.push_back(name);
      } else if (w == "{pred}") {
        out.push_back(pred);
      } else if (w == "{verb}") {
        out.push_back(verb);
      } else {
        out.push_back(w);
      }
    }
    return out;
  }

  /// Gold answer plus four distractors: up to `in_clip_distractors` from
  /// `preferred` then `in_clip`, the rest from `vocab` minus `exclude`.
  QAItem make_answers(const std::string& gold, std::vector<std::string> preferred,
                      std::vector<std::string> in_clip, const std::vector<std::string>& vocab,
                      const std::set<std::string>& exclude) {
    QAItem qa;
    std::vector<std::string> options;
    auto dedup = [&](std::vector<std::string>& v) {
      v.erase(std::remove(v.begin(), v.end(), gold), v.end());
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
      shuffle(v);
    };
    dedup(preferred);
    dedup(in_clip);
    for (const auto* list : {&preferred, &in_clip}) {
      for (const auto& o : *list) {
        if (static_cast<int>(options.size()) >= cfg_.in_clip_distractors) break;
        if (std::find(options.begin(), options.end(), o) == options.end()) options.push_back(o);
      }
    }
    std::vector<std::string> pool;
    for (const auto& v : vocab) {
      if (v != gold && !exclude.count(v) &&
          std::find(options.begin(), options.end(), v) == options.end()) {
        pool.push_back(v);
      }
    }
    if (pool.size() + options.size() < 4) {
      // Vocabulary too small to avoid clip content; relax the exclusion.
      for (const auto& v : vocab) {
        if (v != gold && std::find(options.begin(), options.end(), v) == options.end() &&
            std::find(pool.begin(), pool.end(), v) == pool.end()) {
          pool.push_back(v);
        }
      }
    }
    shuffle(pool);
    for (std::size_t i = 0; options.size() < 4 && i < pool.size(); ++i) options.push_back(pool[i]);
    options.push_back(gold);
    shuffle(options);
    for (std::size_t i = 0; i < options.size(); ++i) {
      qa.answers.push_back({options[i]});
      if (options[i] == gold) qa.correct_index = static_cast<int>(i);
    }
    return qa;
  }

  void build_questions() {
    std::vector<std::string> triple_objects;
    std::set<std::string> clip_objects;
    for (const auto& f : clip_.frames) {
      for (const auto& t : f.triples) triple_objects.push_back(t.object);
      for (const auto& o : f.objects) clip_objects.insert(o.label);
    }

    std::vector<QAItem> visual;
    // One question per frame in which a principal is seen acting; the
    // window is that frame, so other people's objects share the view.
    for (const auto& [key, times] : occurrences_) {
      const auto [c, phase] = key;
      const Action& act = actions_[c][static_cast<std::size_t>(phase)];
      for (const double when : times) {
        std::vector<std::string> here;
        for (const auto& f : clip_.frames) {
          if (f.time != when) continue;
          for (const auto& t : f.triples) here.push_back(t.object);
        }
        QAItem qa =
            make_answers(act.object, here, triple_objects, cfg_.object_vocab, clip_objects);
        qa.question = fill_template(cfg_.visual_template, principals_[c].name, act.predicate, "");
        qa.ts_start = when;
        qa.ts_end = when + 0.5 / cfg_.fps;
        qa.kind = "visual";
        visual.push_back(std::move(qa));
      }
    }

    std::vector<QAItem> textual;
    std::set<std::string> clip_topics;
    std::map<std::pair<std::string, std::string>, int> said;
    for (const auto& s : clip_.subtitles) {
      clip_topics.insert(s.tokens.back());
      ++said[{s.speaker, s.tokens[1]}];
    }
    for (const auto& s : clip_.subtitles) {
      if (said[{s.speaker, s.tokens[1]}] != 1) continue;
      std::vector<std::string> others;
      for (const auto& o : clip_.subtitles) {
        if (&o != &s) others.push_back(o.tokens.back());
      }
      QAItem qa = make_answers(s.tokens.back(), {}, others, cfg_.topic_vocab, clip_topics);
      qa.question = fill_template(cfg_.textual_template, s.speaker, "", s.tokens[1]);
      qa.ts_start = s.t_start;
      qa.ts_end = s.t_end;
      qa.kind = "textual";
      textual.push_back(std::move(qa));
    }

    shuffle(visual);
    shuffle(textual);
    const int want_visual = (cfg_.qas_per_clip * 4 + 6) / 7;
    const int n_vis = std::min<int>(want_visual, static_cast<int>(visual.size()));
    const int n_text =
        std::min<int>(cfg_.qas_per_clip - n_vis, static_cast<int>(textual.size()));
    for (int i = 0; i < n_vis; ++i) clip_.qas.push_back(std::move(visual[i]));
    for (int i = 0; i < n_text; ++i) clip_.qas.push_back(std::move(textual[i]));
    shuffle(clip_.qas);
  }

  const GenConfig& cfg_;
  const std::vector<Eigen::VectorXd>& protos_;
  std::mt19937_64 rng_;
  Clip clip_;
  std::vector<Character> principals_;
  std::optional<Character> extra_;
  std::vector<std::array<Action, 2>> actions_;
  std::vector<std::string> background_;
  std::map<std::pair<std::size_t, int>, std::vector<double>> occurrences_;
  std::map<int, std::string> truth_;
  int next_face_id_ = 0;
};

}  // namespace

std::vector<Clip> generate_corpus(const GenConfig& config) {
  config.validate();
  const auto protos = character_prototypes(config);
  std::vector<Clip> clips;
  clips.reserve(static_cast<std::size_t>(config.n_clips));
  for (int i = 0; i < config.n_clips; ++i) {
    clips.push_back(ClipBuilder(config, protos, i).build());
  }
  return clips;
}

ClipView clip_view(const Clip& clip, const QAItem& qa, bool use_ts) {
  ClipView view;
  if (!use_ts) {
    view.clip = clip;
    return view;
  }
  const double a = qa.ts_start;
  const double b = qa.ts_end;
  view.clip.clip_id = clip.clip_id;
  view.clip.qas = clip.qas;
  if (b < 0 || a > clip.duration()) {
    view.out_of_range = true;
    if (clip.truth) view.clip.truth.emplace();
    return view;
  }
  for (const auto& f : clip.frames) {
    if (f.time >= a && f.time <= b) view.clip.frames.push_back(f);
  }
  for (const auto& s : clip.subtitles) {
    if (s.t_start <= b && s.t_end >= a) view.clip.subtitles.push_back(s);
  }
  if (clip.truth) {
    std::map<int, std::string> truth;
    for (const auto& f : view.clip.frames) {
      for (const auto& face : f.faces) {
        auto it = clip.truth->find(face.face_id);
        if (it != clip.truth->end()) truth.emplace(it->first, it->second);
      }
    }
    view.clip.truth = std::move(truth);
  }
  return view;
}

}  // namespace carn
