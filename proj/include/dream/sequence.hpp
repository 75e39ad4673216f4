#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dream {

enum class Modality : std::uint8_t { kText, kVisual, kGenerated };

// Token ids with a per-token modality tag.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<Modality> tags;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  void push(int id, Modality tag) {
    ids.push_back(id);
    tags.push_back(tag);
  }
  std::size_t count(Modality tag) const {
    std::size_t n = 0;
    for (auto t : tags) n += t == tag;
    return n;
  }
  // Index of the first token carrying tag, or size() when absent.
  std::size_t first(Modality tag) const {
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == tag) return i;
    return tags.size();
  }
  bool operator==(const TokenSequence&) const = default;
};

}  // namespace dream
