#include <cmath>
#include <fstream>
#include <set>

#include "carn/corpus.hpp"
#include "carn/errors.hpp"
#include "json.hpp"

namespace carn {

using nlohmann::json;

namespace {

json box_json(const BBox& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

json opt_box_json(const std::optional<BBox>& b) { return b ? box_json(*b) : json(nullptr); }

// Field access with line-numbered errors.
class Reader {
 public:
  explicit Reader(std::size_t line) : line_(line) {}

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, what); }

  const json& field(const json& obj, const char* key) const {
    if (!obj.is_object()) fail(std::string("expected an object around '") + key + "'");
    auto it = obj.find(key);
    if (it == obj.end()) fail(std::string("missing required field '") + key + "'");
    return *it;
  }

  std::string str(const json& j, const char* what) const {
    if (!j.is_string()) fail(std::string(what) + " must be a string");
    return j.get<std::string>();
  }

  std::string nonempty(const json& j, const char* what) const {
    std::string s = str(j, what);
    if (s.empty()) fail(std::string(what) + " must not be empty");
    return s;
  }

  double number(const json& j, const char* what) const {
    if (!j.is_number()) fail(std::string(what) + " must be a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(std::string(what) + " must be finite");
    return v;
  }

  int integer(const json& j, const char* what) const {
    if (!j.is_number_integer()) fail(std::string(what) + " must be an integer");
    return j.get<int>();
  }

  const json& array(const json& j, const char* what) const {
    if (!j.is_array()) fail(std::string(what) + " must be an array");
    return j;
  }

  BBox box(const json& j, const char* what) const {
    array(j, what);
    if (j.size() != 4) fail(std::string(what) + " must have 4 coordinates");
    BBox b{number(j[0], what), number(j[1], what), number(j[2], what), number(j[3], what)};
    if (!b.valid()) fail(std::string(what) + " must be non-negative with positive area");
    return b;
  }

  std::optional<BBox> opt_box(const json& obj, const char* key) const {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    return box(*it, key);
  }

  Tokens tokens(const json& j, const char* what) const {
    Tokens out;
    for (const auto& t : array(j, what)) out.push_back(str(t, what));
    return out;
  }

 private:
  std::size_t line_;
};

}  // namespace

std::string clip_to_json_line(const Clip& clip) {
  json frames = json::array();
  for (const auto& f : clip.frames) {
    json faces = json::array();
    for (const auto& face : f.faces) {
      faces.push_back({{"face_id", face.face_id},
                       {"frame_id", face.frame_id},
                       {"box", box_json(face.box)},
                       {"embedding", std::vector<double>(face.embedding.data(),
                                                         face.embedding.data() +
                                                             face.embedding.size())}});
    }
    json humans = json::array();
    for (const auto& h : f.human_boxes) humans.push_back({{"box", box_json(h.box)}, {"word", h.word}});
    json objects = json::array();
    for (const auto& o : f.objects) {
      objects.push_back({{"label", o.label},
                         {"attribute", o.attribute ? json(*o.attribute) : json(nullptr)}});
    }
    json triples = json::array();
    for (const auto& t : f.triples) {
      triples.push_back({{"subject", t.subject},
                         {"predicate", t.predicate},
                         {"object", t.object},
                         {"subject_box", opt_box_json(t.subject_box)},
                         {"object_box", opt_box_json(t.object_box)}});
    }
    frames.push_back({{"frame_id", f.frame_id},
                      {"time", f.time},
                      {"faces", faces},
                      {"human_boxes", humans},
                      {"objects", objects},
                      {"triples", triples}});
  }
  json subtitles = json::array();
  for (const auto& s : clip.subtitles) {
    subtitles.push_back(
        {{"speaker", s.speaker}, {"tokens", s.tokens}, {"t_start", s.t_start}, {"t_end", s.t_end}});
  }
  json qas = json::array();
  for (const auto& q : clip.qas) {
    qas.push_back({{"question", q.question},
                   {"answers", q.answers},
                   {"correct_index", q.correct_index},
                   {"ts_interval", json::array({q.ts_start, q.ts_end})},
                   {"kind", q.kind}});
  }
  json truth = nullptr;
  if (clip.truth) {
    truth = json::object();
    for (const auto& [id, name] : *clip.truth) truth[std::to_string(id)] = name;
  }
  json out = {{"schema_version", kCorpusSchema},
              {"clip_id", clip.clip_id},
              {"frames", frames},
              {"subtitles", subtitles},
              {"qas", qas},
              {"truth", truth}};
  return out.dump();
}

Clip clip_from_json_line(const std::string& line, std::size_t line_no) {
  Reader r(line_no);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    r.fail(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) r.fail("a clip must be a JSON object");

  const std::string version = r.str(r.field(j, "schema_version"), "schema_version");
  if (version != kCorpusSchema) {
    throw VersionError("line " + std::to_string(line_no) + ": unsupported schema_version '" +
                       version + "' (expected '" + kCorpusSchema + "')");
  }

  Clip clip;
  clip.clip_id = r.str(r.field(j, "clip_id"), "clip_id");
  std::set<int> face_ids;
  int last_frame = -1;
  bool first = true;
  for (const auto& jf : r.array(r.field(j, "frames"), "frames")) {
    Frame f;
    f.frame_id = r.integer(r.field(jf, "frame_id"), "frame_id");
    if (!first && f.frame_id <= last_frame) r.fail("frame_ids must be strictly increasing");
    first = false;
    last_frame = f.frame_id;
    f.time = r.number(r.field(jf, "time"), "time");
    for (const auto& jface : r.array(r.field(jf, "faces"), "faces")) {
      FaceDetection face;
      face.face_id = r.integer(r.field(jface, "face_id"), "face_id");
      face.frame_id = r.integer(r.field(jface, "frame_id"), "face frame_id");
      if (face.frame_id != f.frame_id) r.fail("face frame_id does not match its frame");
      if (!face_ids.insert(face.face_id).second) r.fail("duplicate face_id");
      face.box = r.box(r.field(jface, "box"), "face box");
      const auto& je = r.array(r.field(jface, "embedding"), "embedding");
      if (je.empty()) r.fail("embedding must not be empty");
      face.embedding.resize(static_cast<Eigen::Index>(je.size()));
      for (std::size_t d = 0; d < je.size(); ++d) {
        face.embedding(static_cast<Eigen::Index>(d)) = r.number(je[d], "embedding");
      }
      if (std::abs(face.embedding.norm() - 1.0) > 1e-6) r.fail("embedding must have unit norm");
      f.faces.push_back(std::move(face));
    }
    for (const auto& jh : r.array(r.field(jf, "human_boxes"), "human_boxes")) {
      f.human_boxes.push_back(
          HumanBox{r.box(r.field(jh, "box"), "human box"), r.nonempty(r.field(jh, "word"), "word")});
    }
    for (const auto& jo : r.array(r.field(jf, "objects"), "objects")) {
      DetectedObject o;
      o.label = r.nonempty(r.field(jo, "label"), "label");
      auto it = jo.find("attribute");
      if (it != jo.end() && !it->is_null()) o.attribute = r.nonempty(*it, "attribute");
      f.objects.push_back(std::move(o));
    }
    for (const auto& jt : r.array(r.field(jf, "triples"), "triples")) {
      RelationTriple t;
      t.subject = r.nonempty(r.field(jt, "subject"), "subject");
      t.predicate = r.nonempty(r.field(jt, "predicate"), "predicate");
      t.object = r.nonempty(r.field(jt, "object"), "object");
      t.subject_box = r.opt_box(jt, "subject_box");
      t.object_box = r.opt_box(jt, "object_box");
      f.triples.push_back(std::move(t));
    }
    clip.frames.push_back(std::move(f));
  }

  for (const auto& js : r.array(r.field(j, "subtitles"), "subtitles")) {
    SubtitleLine s;
    s.speaker = r.nonempty(r.field(js, "speaker"), "speaker");
    s.tokens = r.tokens(r.field(js, "tokens"), "tokens");
    s.t_start = r.number(r.field(js, "t_start"), "t_start");
    s.t_end = r.number(r.field(js, "t_end"), "t_end");
    if (s.t_start > s.t_end) r.fail("subtitle t_start exceeds t_end");
    clip.subtitles.push_back(std::move(s));
  }

  for (const auto& jq : r.array(r.field(j, "qas"), "qas")) {
    QAItem q;
    q.question = r.tokens(r.field(jq, "question"), "question");
    const auto& ja = r.array(r.field(jq, "answers"), "answers");
    if (ja.size() != 5) r.fail("a QA item needs exactly 5 answers");
    for (const auto& a : ja) q.answers.push_back(r.tokens(a, "answer"));
    q.correct_index = r.integer(r.field(jq, "correct_index"), "correct_index");
    if (q.correct_index < 0 || q.correct_index > 4) r.fail("correct_index must lie in 0..4");
    const auto& ts = r.array(r.field(jq, "ts_interval"), "ts_interval");
    if (ts.size() != 2) r.fail("ts_interval must have 2 entries");
    q.ts_start = r.number(ts[0], "ts_interval");
    q.ts_end = r.number(ts[1], "ts_interval");
    if (q.ts_start > q.ts_end) r.fail("ts_interval start exceeds end");
    auto it = jq.find("kind");
    if (it != jq.end() && !it->is_null()) q.kind = r.str(*it, "kind");
    clip.qas.push_back(std::move(q));
  }

  const json& jt = r.field(j, "truth");
  if (!jt.is_null()) {
    if (!jt.is_object()) r.fail("truth must be an object or null");
    std::map<int, std::string> truth;
    for (const auto& [key, value] : jt.items()) {
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        r.fail("truth key '" + key + "' is not a face id");
      }
      if (!face_ids.count(id)) r.fail("truth key " + key + " does not name a face");
      truth.emplace(id, r.nonempty(value, "truth name"));
    }
    if (truth.size() != face_ids.size()) r.fail("truth must cover every face_id");
    clip.truth = std::move(truth);
  }
  return clip;
}

void write_corpus(const std::vector<Clip>& clips, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  for (const auto& c : clips) out << clip_to_json_line(c) << '\n';
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

std::vector<Clip> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::vector<Clip> clips;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    clips.push_back(clip_from_json_line(line, line_no));
  }
  return clips;
}

}  // namespace carn
