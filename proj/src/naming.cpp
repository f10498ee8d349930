#include "carn/naming.hpp"

#include <map>

namespace carn {

Eigen::MatrixXd face_embeddings(const Clip& clip, std::vector<int>* face_ids) {
  Eigen::Index n = 0;
  Eigen::Index dim = 0;
  for (const auto& f : clip.frames) {
    for (const auto& face : f.faces) {
      if (n == 0) dim = face.embedding.size();
      if (face.embedding.size() != dim) throw ShapeError("face embeddings differ in dimension");
      ++n;
    }
  }
  Eigen::MatrixXd out(n, dim);
  Eigen::Index r = 0;
  if (face_ids) face_ids->clear();
  for (const auto& f : clip.frames) {
    for (const auto& face : f.faces) {
      out.row(r++) = face.embedding.transpose();
      if (face_ids) face_ids->push_back(face.face_id);
    }
  }
  return out;
}

const SubtitleLine* speaker_at(const Clip& clip, double t) {
  const SubtitleLine* found = nullptr;
  for (const auto& line : clip.subtitles) {
    if (line.t_start <= t && t <= line.t_end) {
      if (!found || line.t_start >= found->t_start) found = &line;
    }
  }
  return found;
}

TargetSeq broadcast_targets(const Clip& clip, const CastList& cast, double epsilon) {
  if (!(epsilon >= 0 && epsilon < 1)) throw std::invalid_argument("epsilon must lie in [0, 1)");
  TargetSeq out;
  out.epsilon = epsilon;
  const int classes = cast.classes();
  for (const auto& frame : clip.frames) {
    if (frame.faces.empty()) continue;
    const SubtitleLine* line = speaker_at(clip, frame.time);
    if (!line) continue;
    const int label = map_speaker(line->speaker, cast);
    if (label == cast.unk_index) continue;
    Eigen::VectorXd target = Eigen::VectorXd::Constant(classes, epsilon / classes);
    target(label) += 1.0 - epsilon;
    for (const auto& face : frame.faces) {
      out.entries.push_back(TargetEntry{face.face_id, frame.frame_id, target});
    }
  }
  return out;
}

std::vector<TargetFrame> group_targets(const TargetSeq& targets,
                                       const std::vector<int>& face_ids) {
  std::map<int, Eigen::Index> row_of;
  for (std::size_t i = 0; i < face_ids.size(); ++i) {
    row_of.emplace(face_ids[i], static_cast<Eigen::Index>(i));
  }
  std::vector<TargetFrame> frames;
  std::map<int, std::size_t> frame_slot;
  for (const auto& e : targets.entries) {
    auto row = row_of.find(e.face_id);
    if (row == row_of.end()) continue;
    auto [it, inserted] = frame_slot.emplace(e.frame_id, frames.size());
    if (inserted) frames.push_back(TargetFrame{{}, e.target});
    frames[it->second].rows.push_back(row->second);
  }
  return frames;
}

}  // namespace carn
