#include "dream/vtc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dream/errors.hpp"

namespace dream::vtc {

int kept_count(int v, double keep_fraction) {
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw ParameterError("vtc: keep_fraction must lie in (0, 1]");
  }
  return static_cast<int>(std::round(static_cast<double>(v) * keep_fraction));  // half away from zero
}

std::vector<double> visual_importance_scores(const LayerTrace& trace, int offset, int v, int rows) {
  if (trace.layers() == 0) throw ValidationError("vtc: trace has no layers");
  if (offset < 0 || v < 0 || offset + v > trace.keys) throw DimensionError("vtc: visual columns out of range");
  const int n = rows > 0 ? std::min(rows, trace.rows) : trace.rows;
  const int last = trace.layers() - 1;
  std::vector<double> scores(static_cast<std::size_t>(v), 0.0);
  for (int h = 0; h < trace.heads; ++h) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < v; ++j) scores[static_cast<std::size_t>(j)] += trace.weight(last, h, i, offset + j);
    }
  }
  for (double& s : scores) s /= trace.heads;
  return scores;
}

Selection select_tokens(const std::vector<double>& scores, double keep_fraction) {
  if (scores.empty()) throw ValidationError("vtc: empty score vector");
  const int v = static_cast<int>(scores.size());
  const int k = kept_count(v, keep_fraction);
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  Selection sel;
  sel.keep_fraction = keep_fraction;
  sel.original_v = v;
  sel.indices.assign(order.begin(), order.begin() + k);
  std::sort(sel.indices.begin(), sel.indices.end());
  return sel;
}

std::vector<int> retained_positions(const TokenSequence& tokens, const Selection& sel) {
  if (static_cast<int>(tokens.count(Modality::kVisual)) != sel.original_v) {
    throw ValidationError("vtc: sequence holds " + std::to_string(tokens.count(Modality::kVisual)) +
                          " visual tokens, selection expects " + std::to_string(sel.original_v));
  }
  std::vector<int> keep;
  int vis = 0;
  std::size_t next = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens.tags[i] != Modality::kVisual) {
      keep.push_back(static_cast<int>(i));
      continue;
    }
    if (next < sel.indices.size() && sel.indices[next] == vis) {
      keep.push_back(static_cast<int>(i));
      ++next;
    }
    ++vis;
  }
  return keep;
}

TokenSequence apply_selection(const TokenSequence& tokens, const Selection& sel) {
  TokenSequence out;
  for (int i : retained_positions(tokens, sel)) {
    out.push(tokens.ids[static_cast<std::size_t>(i)], tokens.tags[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::string selection_line(std::uint64_t sample_id, const Selection& sel) {
  std::string s = std::to_string(sample_id) + "\t";
  for (std::size_t i = 0; i < sel.indices.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sel.indices[i]);
  }
  return s;
}

}  // namespace dream::vtc
