#ifndef CARN_MODALITY_HPP
#define CARN_MODALITY_HPP

#include <string>
#include <vector>

namespace carn {

/// Which input streams feed the reasoning network. Names can be injected
/// into objects and relations independently.
struct ModalityConfig {
  bool use_sub = true;
  bool use_objs = true;
  bool use_rels = true;
  bool objs_names = true;
  bool rels_names = true;

  bool use_names() const { return (use_objs && objs_names) || (use_rels && rels_names); }
  bool uses_visual() const { return use_objs || use_rels; }
  /// Throws std::invalid_argument when nothing is enabled.
  void validate() const;
  bool operator==(const ModalityConfig&) const = default;
};

/// Label in the ablation-table style, e.g. "Sub + Objs_nm + Rels".
std::string variant_label(const ModalityConfig& m);

/// Parses either a variant label or a comma list such as
/// "sub,objs_nm,rels_nm".
ModalityConfig parse_modality(const std::string& text);

/// The nine ablation variants, in table order.
std::vector<ModalityConfig> ablation_variants();

}  // namespace carn

#endif  // CARN_MODALITY_HPP
