#ifndef CARN_SEMANTICS_HPP
#define CARN_SEMANTICS_HPP

// Per-frame visual semantics: face/person matching, character-name
// injection into relation triples and objects, and flattening to tokens.

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "carn/corpus.hpp"
#include "carn/modality.hpp"

namespace carn {

inline constexpr int kUnmatched = -1;

/// Per human box, the matched face_id or kUnmatched.
struct FaceHumanAssignment {
  std::vector<int> face_for_human;
  bool operator==(const FaceHumanAssignment&) const = default;
};

/// face_id -> character name, for faces the naming head put in the cast.
using FaceNames = std::map<int, std::string>;

struct TokenStream {
  Tokens tokens;
  std::vector<char> name_flags;  // 1 where the token is a character name

  void push(std::string token, bool is_name) {
    tokens.push_back(std::move(token));
    name_flags.push_back(is_name ? 1 : 0);
  }
  void append(const TokenStream& other);
  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  bool operator==(const TokenStream&) const = default;
};

struct SemanticStream {
  TokenStream objects;
  TokenStream relations;  // 3 tokens per triple
};

/// Fraction of the face box covered by the human box, in [0, 1].
double face_overlap(const BBox& face, const BBox& human);

/// For each human box, the face with the largest face_overlap; zero overlap
/// leaves it unmatched and ties go to the lowest face_id.
FaceHumanAssignment match_faces_to_humans(std::span<const FaceDetection> faces,
                                          std::span<const HumanBox> humans);

/// Rewrites human-referring subjects/objects whose box belongs to a human
/// box with a matched, named face.
std::vector<RelationTriple> replace_names(std::span<const RelationTriple> triples,
                                          std::span<const HumanBox> humans,
                                          const FaceHumanAssignment& assignment,
                                          const FaceNames& face_names,
                                          const std::set<std::string>& human_words);

/// Object tokens ([attribute] label), each followed by one frame name per
/// (object, name) pair; objects pass through unchanged without names.
TokenStream augment_objects_with_names(std::span<const DetectedObject> objects,
                                       std::span<const std::string> frame_names);

/// S P O tokens per triple, frames in order. Tokens in `names` are flagged.
TokenStream flatten_relations(std::span<const std::vector<RelationTriple>> frames,
                              const std::set<std::string>& names);

/// Distinct names of the frame's named faces, in face order.
std::vector<std::string> frame_names(const Frame& frame, const FaceNames& face_names);

/// Objects and relations of a (possibly time-restricted) clip under the
/// given modality flags.
SemanticStream build_semantic_stream(const Clip& clip, const FaceNames& face_names,
                                     const ModalityConfig& modality,
                                     const std::set<std::string>& human_words);

std::set<std::string> default_human_words();

}  // namespace carn

#endif  // CARN_SEMANTICS_HPP
