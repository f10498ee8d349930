#include <algorithm>
#include <set>

#include "carn/model.hpp"

namespace carn {

Vocab::Vocab(std::vector<std::string> words, std::vector<std::string> names)
    : words_(std::move(words)), names_(std::move(names)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!word_lookup_.emplace(words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate word '" + words_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!name_lookup_.emplace(names_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate name '" + names_[i] + "'");
    }
  }
}

Vocab Vocab::build(const std::vector<Clip>& clips, const CastList& cast) {
  std::vector<std::string> names = cast.names;
  std::set<std::string> other_speakers;
  for (const auto& [speaker, n] : count_speakers(clips)) {
    if (std::find(names.begin(), names.end(), speaker) == names.end()) {
      other_speakers.insert(speaker);
    }
  }
  names.insert(names.end(), other_speakers.begin(), other_speakers.end());
  const std::set<std::string> name_set(names.begin(), names.end());

  std::set<std::string> words;
  auto add = [&](const std::string& w) {
    if (!name_set.count(w) && w != kPadToken) words.insert(w);
  };
  for (const auto& clip : clips) {
    for (const auto& f : clip.frames) {
      for (const auto& h : f.human_boxes) add(h.word);
      for (const auto& o : f.objects) {
        add(o.label);
        if (o.attribute) add(*o.attribute);
      }
      for (const auto& t : f.triples) {
        add(t.subject);
        add(t.predicate);
        add(t.object);
      }
    }
    for (const auto& s : clip.subtitles) {
      for (const auto& w : s.tokens) add(w);
    }
    for (const auto& q : clip.qas) {
      for (const auto& w : q.question) add(w);
      for (const auto& a : q.answers) {
        for (const auto& w : a) add(w);
      }
    }
  }
  return Vocab(std::vector<std::string>(words.begin(), words.end()), std::move(names));
}

int Vocab::word_index(const std::string& token) const {
  auto it = word_lookup_.find(token);
  return it == word_lookup_.end() ? -1 : it->second;
}

int Vocab::name_index(const std::string& token) const {
  auto it = name_lookup_.find(token);
  return it == name_lookup_.end() ? -1 : it->second;
}

TokenStream Vocab::flag_text(const Tokens& tokens) const {
  TokenStream out;
  for (const auto& t : tokens) out.push(t, is_name(t));
  return out;
}

}  // namespace carn
