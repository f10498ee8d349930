#include "carn/semantics.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace carn {

void TokenStream::append(const TokenStream& other) {
  tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
  name_flags.insert(name_flags.end(), other.name_flags.begin(), other.name_flags.end());
}

void ModalityConfig::validate() const {
  if (!use_sub && !use_objs && !use_rels) {
    throw std::invalid_argument("at least one modality must be enabled");
  }
}

std::string variant_label(const ModalityConfig& m) {
  std::vector<std::string> parts;
  if (m.use_sub) parts.push_back("Sub");
  if (m.use_objs) parts.push_back(m.objs_names ? "Objs_nm" : "Objs");
  if (m.use_rels) parts.push_back(m.rels_names ? "Rels_nm" : "Rels");
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? " + " : "") + parts[i];
  return out;
}

ModalityConfig parse_modality(const std::string& text) {
  ModalityConfig m{false, false, false, false, false};
  std::string normalized;
  for (char c : text) normalized += (c == '+' || c == ' ') ? ',' : static_cast<char>(std::tolower(c));
  std::istringstream in(normalized);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item == "sub") {
      m.use_sub = true;
    } else if (item == "objs") {
      m.use_objs = true;
    } else if (item == "objs_nm") {
      m.use_objs = m.objs_names = true;
    } else if (item == "rels") {
      m.use_rels = true;
    } else if (item == "rels_nm") {
      m.use_rels = m.rels_names = true;
    } else {
      throw std::invalid_argument("unknown modality '" + item + "'");
    }
  }
  m.validate();
  return m;
}

std::vector<ModalityConfig> ablation_variants() {
  // use_sub, use_objs, use_rels, objs_names, rels_names
  return {
      {true, false, false, false, false},  // Sub
      {true, true, false, false, false},   // Sub + Objs
      {true, false, true, false, false},   // Sub + Rels
      {true, true, false, true, false},    // Sub + Objs_nm
      {true, false, true, false, true},    // Sub + Rels_nm
      {true, true, true, false, false},    // Sub + Objs + Rels
      {true, true, true, false, true},     // Sub + Objs + Rels_nm
      {true, true, true, true, false},     // Sub + Objs_nm + Rels
      {true, true, true, true, true},      // Sub + Objs_nm + Rels_nm
  };
}

double face_overlap(const BBox& face, const BBox& human) {
  const double a = face.area();
  return a > 0 ? intersection_area(face, human) / a : 0.0;
}

FaceHumanAssignment match_faces_to_humans(std::span<const FaceDetection> faces,
                                          std::span<const HumanBox> humans) {
  FaceHumanAssignment out;
  out.face_for_human.assign(humans.size(), kUnmatched);
  for (std::size_t h = 0; h < humans.size(); ++h) {
    double best = 0;
    for (const auto& f : faces) {
      const double s = face_overlap(f.box, humans[h].box);
      if (s <= 0) continue;
      int& cur = out.face_for_human[h];
      if (s > best || (s == best && f.face_id < cur)) {
        best = s;
        cur = f.face_id;
      }
    }
  }
  return out;
}

namespace {

double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Human box an endpoint box refers to, or -1.
int human_for_box(const std::optional<BBox>& box, std::span<const HumanBox> humans) {
  if (!box) return -1;
  int best = -1;
  double best_iou = 0.5;
  for (std::size_t h = 0; h < humans.size(); ++h) {
    const double v = iou(*box, humans[h].box);
    if (v > best_iou || (best < 0 && v == best_iou)) {
      best_iou = v;
      best = static_cast<int>(h);
    }
  }
  return best;
}

void rewrite(std::string& token, const std::optional<BBox>& box, std::span<const HumanBox> humans,
             const FaceHumanAssignment& assignment, const FaceNames& names,
             const std::set<std::string>& human_words) {
  if (!human_words.count(token)) return;
  const int h = human_for_box(box, humans);
  if (h < 0 || static_cast<std::size_t>(h) >= assignment.face_for_human.size()) return;
  const int face = assignment.face_for_human[static_cast<std::size_t>(h)];
  if (face == kUnmatched) return;
  auto it = names.find(face);
  if (it != names.end()) token = it->second;
}

}  // namespace

std::vector<RelationTriple> replace_names(std::span<const RelationTriple> triples,
                                          std::span<const HumanBox> humans,
                                          const FaceHumanAssignment& assignment,
                                          const FaceNames& face_names,
                                          const std::set<std::string>& human_words) {
  std::vector<RelationTriple> out(triples.begin(), triples.end());
  for (auto& t : out) {
    rewrite(t.subject, t.subject_box, humans, assignment, face_names, human_words);
    rewrite(t.object, t.object_box, humans, assignment, face_names, human_words);
  }
  return out;
}

TokenStream augment_objects_with_names(std::span<const DetectedObject> objects,
                                       std::span<const std::string> frame_names) {
  TokenStream out;
  for (const auto& o : objects) {
    auto emit_object = [&] {
      if (o.attribute) out.push(*o.attribute, false);
      out.push(o.label, false);
    };
    if (frame_names.empty()) {
      emit_object();
      continue;
    }
    for (const auto& name : frame_names) {
      emit_object();
      out.push(name, true);
    }
  }
  return out;
}

TokenStream flatten_relations(std::span<const std::vector<RelationTriple>> frames,
                              const std::set<std::string>& names) {
  TokenStream out;
  for (const auto& triples : frames) {
    for (const auto& t : triples) {
      out.push(t.subject, names.count(t.subject) > 0);
      out.push(t.predicate, false);
      out.push(t.object, names.count(t.object) > 0);
    }
  }
  return out;
}

std::vector<std::string> frame_names(const Frame& frame, const FaceNames& face_names) {
  std::vector<std::string> out;
  for (const auto& f : frame.faces) {
    auto it = face_names.find(f.face_id);
    if (it == face_names.end()) continue;
    if (std::find(out.begin(), out.end(), it->second) == out.end()) out.push_back(it->second);
  }
  return out;
}

SemanticStream build_semantic_stream(const Clip& clip, const FaceNames& face_names,
                                     const ModalityConfig& modality,
                                     const std::set<std::string>& human_words) {
  SemanticStream out;
  std::set<std::string> injected;
  std::vector<std::vector<RelationTriple>> per_frame;
  for (const auto& frame : clip.frames) {
    const auto names = frame_names(frame, face_names);
    if (modality.use_objs) {
      const std::vector<std::string> none;
      out.objects.append(
          augment_objects_with_names(frame.objects, modality.objs_names ? names : none));
    }
    if (modality.use_rels) {
      if (modality.rels_names) {
        const auto assignment = match_faces_to_humans(frame.faces, frame.human_boxes);
        per_frame.push_back(
            replace_names(frame.triples, frame.human_boxes, assignment, face_names, human_words));
        injected.insert(names.begin(), names.end());
      } else {
        per_frame.push_back(frame.triples);
      }
    }
  }
  if (modality.use_rels) out.relations = flatten_relations(per_frame, injected);
  return out;
}

std::set<std::string> default_human_words() {
  return {"man", "woman", "person", "boy", "girl", "guy", "lady", "people"};
}

}  // namespace carn
