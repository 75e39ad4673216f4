#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dream/model.hpp"
#include "dream/sequence.hpp"

namespace dream::vtc {

struct Selection {
  double keep_fraction = 1.0;
  int original_v = 0;
  std::vector<int> indices;  // retained visual indices, ascending

  int kept() const { return static_cast<int>(indices.size()); }
  bool operator==(const Selection&) const = default;
};

// Half-away-from-zero rounding of v * keep_fraction.
int kept_count(int v, double keep_fraction);

// Received attention of each visual column in the last traced layer, summed
// over the first `rows` query rows (all rows when rows <= 0) and averaged
// over heads. Visual column j sits at key index offset + j.
std::vector<double> visual_importance_scores(const LayerTrace& trace, int offset, int v, int rows = 0);

// Top kept_count(v, keep_fraction) scores, ties toward the lower index,
// reported in ascending index order.
Selection select_tokens(const std::vector<double>& scores, double keep_fraction);

// Keeps text tokens and the retained visual tokens, in original order.
TokenSequence apply_selection(const TokenSequence& tokens, const Selection& sel);
// Original positions that survive apply_selection, in order.
std::vector<int> retained_positions(const TokenSequence& tokens, const Selection& sel);

// "sample_id<TAB>i,j,k"
std::string selection_line(std::uint64_t sample_id, const Selection& sel);

}  // namespace dream::vtc
