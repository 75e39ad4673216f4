#include "dream/speculative.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "dream/errors.hpp"
#include "dream/flops.hpp"
#include "dream/task.hpp"

namespace dream::spec {

namespace {

std::vector<double> row_vec(const Tensor& t, std::size_t r) {
  const auto s = t.row(r);
  return {s.begin(), s.end()};
}

Tensor first_rows(const Tensor& t, int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return gather_rows(t, idx);
}

std::vector<int> iota_vec(int from, int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), from);
  return v;
}

// Ancestors of each new node given the lists of the nodes added so far.
std::vector<int> lineage(const std::vector<std::vector<int>>& known, int parent) {
  if (parent < 0) return {};
  if (parent >= static_cast<int>(known.size())) throw ValidationError("drafter: parent refers to a later node");
  auto anc = known[static_cast<std::size_t>(parent)];
  anc.push_back(parent);
  return anc;
}

kernels::AttentionMask node_self_mask(const std::vector<std::vector<int>>& ancestors, std::size_t base,
                                      int committed) {
  kernels::AttentionMask m;
  const std::size_t n = ancestors.size() - base;
  m.prefix.assign(n, committed);
  m.extra.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int a : ancestors[base + i]) m.extra[i].push_back(committed + a);
    m.extra[i].push_back(committed + static_cast<int>(base + i));
  }
  return m;
}

}  // namespace

std::string mode_name(Mode m) { return m == Mode::kChain ? "chain" : "tree"; }

Mode parse_mode(const std::string& s) {
  if (s == "chain") return Mode::kChain;
  if (s == "tree") return Mode::kTree;
  throw ValidationError("unknown decode mode '" + s + "' (expected chain or tree)");
}

void DecodeConfig::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw ParameterError("decode: temperature must be >= 0");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) throw ParameterError("decode: keep_fraction must lie in (0, 1]");
  if (max_new_tokens < 1) throw ParameterError("decode: max_new_tokens must be >= 1");
  if (mode == Mode::kChain && gamma < 1) throw ParameterError("decode: gamma must be >= 1");
  if (mode == Mode::kTree && (k < 1 || depth < 1 || max_draft_tokens < 1)) {
    throw ParameterError("decode: k, depth and max_draft_tokens must be >= 1");
  }
}

// ---- feature bank ----------------------------------------------------------

FeatureBank::FeatureBank(const DraftModel* model) : model_(model) {
  if (model_) {
    verified_kv_ = project_bank(*model_, Tensor(Shape{0, static_cast<std::size_t>(model_->config.d_model)}));
    speculative_kv_ = verified_kv_;
  }
}

void FeatureBank::append_verified(const Tensor& rows) {
  if (speculative_rows_ != 0) throw StateError("feature bank: verified rows appended above speculative rows");
  if (rows.rows() == 0) return;
  verified_data_.insert(verified_data_.end(), rows.values().begin(), rows.values().end());
  verified_rows_ += static_cast<int>(rows.rows());
  if (model_) verified_kv_ = concat_bank(verified_kv_, project_bank(*model_, rows));
}

void FeatureBank::push_speculative(const Tensor& rows) {
  if (rows.rows() == 0) return;
  if (model_) speculative_kv_ = concat_bank(speculative_kv_, project_bank(*model_, rows));
  speculative_rows_ += static_cast<int>(rows.rows());
}

void FeatureBank::rollback() {
  if (speculative_rows_ == 0) return;
  speculative_rows_ = 0;
  if (model_) speculative_kv_ = project_bank(*model_, Tensor(Shape{0, static_cast<std::size_t>(model_->config.d_model)}));
}

BankKV FeatureBank::view() const {
  if (!model_) return {};
  return concat_bank(verified_kv_, speculative_kv_);
}

// ---- drafters --------------------------------------------------------------

DreamDrafter::DreamDrafter(const DraftModel& model) : model_(model), cache_(model.make_cache()), bank_(&model) {}

void DreamDrafter::prefill(const std::vector<int>& tokens, const std::vector<int>& positions,
                           const Tensor& features) {
  if (features.rows() != tokens.size()) throw DimensionError("draft prefill: one feature row per prompt token");
  bank_.append_verified(features);
  draft_forward(model_, tokens, positions, &cache_, bank_.view(), nullptr, nullptr);
  committed_ = cache_.length();
}

std::vector<double> DreamDrafter::catch_up(const std::vector<int>& tokens, const std::vector<int>& positions) {
  if (bank_.watermark() != committed_ + static_cast<int>(tokens.size()) - 1) {
    throw StateError("draft catch-up: bank watermark out of step with the draft cache");
  }
  bank_.rollback();
  ancestors_.clear();
  const auto out = draft_forward(model_, tokens, positions, &cache_, bank_.view(), nullptr, nullptr);
  committed_ = cache_.length();
  const std::size_t last = tokens.size() - 1;
  bank_.push_speculative(gather_rows(out.em, std::vector<int>{static_cast<int>(last)}));
  return row_vec(out.logits, last);
}

std::vector<std::vector<double>> DreamDrafter::extend(const std::vector<int>& tokens,
                                                      const std::vector<int>& positions,
                                                      const std::vector<int>& parents) {
  if (parents.size() != tokens.size()) throw DimensionError("draft extend: one parent per node");
  const std::size_t base = ancestors_.size();
  if (cache_.length() != committed_ + static_cast<int>(base)) throw StateError("draft extend: cache desync");
  for (int p : parents) ancestors_.push_back(lineage(ancestors_, p));
  const auto self_mask = node_self_mask(ancestors_, base, committed_);

  // Bank rows: verified, then e^M of the last committed token, then e^M of
  // each round node in order.
  const int spec0 = bank_.watermark() + 1;
  kernels::AttentionMask bank_mask;
  bank_mask.prefix.assign(tokens.size(), spec0);
  bank_mask.extra.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (int a : ancestors_[base + i]) bank_mask.extra[i].push_back(spec0 + a);
  }
  const auto out = draft_forward(model_, tokens, positions, &cache_, bank_.view(), &self_mask, &bank_mask);
  bank_.push_speculative(out.em);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < tokens.size(); ++i) rows.push_back(row_vec(out.logits, i));
  return rows;
}

void DreamDrafter::end_round(const Tensor& features) {
  cache_.truncate(committed_);
  bank_.rollback();
  bank_.append_verified(features);
  ancestors_.clear();
}

void SelfDrafter::prefill(const std::vector<int>& tokens, const std::vector<int>& positions, const Tensor&) {
  target_forward(model_, tokens, positions, &cache_, nullptr, false);
  committed_ = cache_.length();
}

std::vector<double> SelfDrafter::catch_up(const std::vector<int>& tokens, const std::vector<int>& positions) {
  ancestors_.clear();
  const auto out = target_forward(model_, tokens, positions, &cache_, nullptr, false);
  committed_ = cache_.length();
  return row_vec(out.logits, tokens.size() - 1);
}

std::vector<std::vector<double>> SelfDrafter::extend(const std::vector<int>& tokens,
                                                     const std::vector<int>& positions,
                                                     const std::vector<int>& parents) {
  if (parents.size() != tokens.size()) throw DimensionError("draft extend: one parent per node");
  const std::size_t base = ancestors_.size();
  if (cache_.length() != committed_ + static_cast<int>(base)) throw StateError("draft extend: cache desync");
  for (int p : parents) ancestors_.push_back(lineage(ancestors_, p));
  const auto mask = node_self_mask(ancestors_, base, committed_);
  const auto out = target_forward(model_, tokens, positions, &cache_, &mask, false);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < tokens.size(); ++i) rows.push_back(row_vec(out.logits, i));
  return rows;
}

void SelfDrafter::end_round(const Tensor&) {
  cache_.truncate(committed_);
  ancestors_.clear();
}

// ---- trees -----------------------------------------------------------------

std::vector<int> DraftTree::children(int parent) const {
  std::vector<int> out;
  for (int j = 0; j < size(); ++j) {
    if (nodes[static_cast<std::size_t>(j)].parent == parent) out.push_back(j);
  }
  return out;
}

std::vector<int> DraftTree::ancestors(int j) const {
  std::vector<int> out;
  for (int p = nodes.at(static_cast<std::size_t>(j)).parent; p >= 0; p = nodes[static_cast<std::size_t>(p)].parent) {
    out.push_back(p);
    if (static_cast<int>(out.size()) > size()) throw ValidationError("draft tree: cycle through node " + std::to_string(j));
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<std::vector<std::uint8_t>> build_tree_mask(const DraftTree& tree) {
  const int n = tree.size();
  for (int i = 0; i < n; ++i) {
    const int p = tree.nodes[static_cast<std::size_t>(i)].parent;
    if (p < -1 || p >= n) throw ValidationError("draft tree: node " + std::to_string(i) + " has a dangling parent");
  }
  const auto un = tree.nodes.size();
  std::vector<std::vector<std::uint8_t>> mask(un, std::vector<std::uint8_t>(un, 0));
  for (int i = 0; i < n; ++i) {
    for (int a : tree.ancestors(i)) mask[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = 1;
    mask[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1;
  }
  for (int i = 0; i < n; ++i) {
    if (tree.nodes[static_cast<std::size_t>(i)].parent >= i) {
      throw ValidationError("draft tree: node " + std::to_string(i) + " precedes its parent");
    }
  }
  return mask;
}

kernels::AttentionMask tree_attention_mask(const DraftTree& tree, int prefix) {
  const auto bits = build_tree_mask(tree);
  const int n = tree.size();
  kernels::AttentionMask m;
  m.prefix.assign(static_cast<std::size_t>(n + 1), prefix + 1);
  m.extra.resize(static_cast<std::size_t>(n + 1));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (bits[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) {
        m.extra[static_cast<std::size_t>(i + 1)].push_back(prefix + 1 + j);
      }
    }
  }
  return m;
}

// ---- records ---------------------------------------------------------------

std::string RoundRecord::to_json() const {
  nlohmann::ordered_json j;
  j["round"] = round;
  j["drafted"] = drafted;
  j["accepted"] = accepted;
  j["committed_tokens"] = committed;
  if (rejection_index >= 0) j["rejection_index"] = rejection_index;
  j["mode"] = mode_name(mode);
  return j.dump();
}

double DecodeMetrics::tau() const {
  if (commits.empty()) return 0.0;
  return static_cast<double>(std::accumulate(commits.begin(), commits.end(), 0LL)) /
         static_cast<double>(commits.size());
}

double DecodeMetrics::seconds_per_token() const { return generated > 0 ? wall_seconds / generated : 0.0; }

double BaselineResult::seconds_per_token() const {
  return tokens.empty() ? 0.0 : wall_seconds / static_cast<double>(tokens.size());
}

// ---- session ---------------------------------------------------------------

Session::Session(const TargetModel& target, std::unique_ptr<Drafter> drafter, DecodeConfig config, Sampler& sampler)
    : target_(target),
      drafter_(std::move(drafter)),
      config_(config),
      sampler_(sampler),
      target_cache_(target.make_cache()) {
  config_.validate();
  if (!drafter_) throw ValidationError("session: no drafter");
}

int Session::sample_from_logits(const std::vector<double>& logits) {
  if (config_.temperature == 0.0) return argmax_row(logits);
  return sampler_.categorical(softmax_probs(logits, config_.temperature));
}

int Session::remaining() const { return config_.max_new_tokens - static_cast<int>(generated_.size()); }

void Session::prefill(const TokenSequence& prompt) {
  NoGradGuard ng;
  const int n = static_cast<int>(prompt.size());
  if (n == 0) throw ValidationError("prefill: empty prompt");
  if (n + config_.max_new_tokens > target_.config.max_seq_len) {
    throw DimensionError("prefill: prompt of " + std::to_string(n) + " tokens plus " +
                         std::to_string(config_.max_new_tokens) + " new tokens exceeds max_seq_len " +
                         std::to_string(target_.config.max_seq_len));
  }
  if (!generated_.empty()) throw StateError("prefill: session already started");

  const auto positions = iota_vec(0, n);
  TargetOutput out;
  {
    flops::Scope fs;
    out = target_forward(target_, prompt.ids, positions, &target_cache_, nullptr, config_.vtc);
    metrics_.target_flops += fs.elapsed();
  }

  const int v = static_cast<int>(prompt.count(Modality::kVisual));
  std::vector<int> retained;
  if (config_.vtc && v > 0) {
    const int offset = static_cast<int>(prompt.first(Modality::kVisual));
    for (int j = 0; j < v; ++j) {
      if (prompt.tags[static_cast<std::size_t>(offset + j)] != Modality::kVisual) {
        throw ValidationError("prefill: visual tokens must be contiguous");
      }
    }
    const auto scores = vtc::visual_importance_scores(*out.trace, offset, v, n);
    selection_ = vtc::select_tokens(scores, config_.keep_fraction);
    retained = vtc::retained_positions(prompt, selection_);
  } else {
    selection_ = vtc::Selection{1.0, v, iota_vec(0, v)};
    retained = positions;
  }
  draft_tokens_.clear();
  for (int r : retained) draft_tokens_.push_back(prompt.ids[static_cast<std::size_t>(r)]);
  {
    flops::Scope fs;
    drafter_->prefill(draft_tokens_, retained, gather_rows(out.final, retained));
    metrics_.draft_flops += fs.elapsed();
  }

  const int first = sample_from_logits(row_vec(out.logits, static_cast<std::size_t>(n - 1)));
  generated_ = {first};
  pending_ = {first};
  next_position_ = n;
  metrics_.generated = 1;
  done_ = (config_.stop_at_eos && first == task::kEos) || remaining() <= 0;
}

void Session::commit(RoundRecord& rec, const std::vector<int>& tokens) {
  std::vector<int> kept = tokens;
  if (config_.stop_at_eos) {
    const auto it = std::find(kept.begin(), kept.end(), task::kEos);
    if (it != kept.end()) {
      kept.erase(it + 1, kept.end());
      done_ = true;
    }
  }
  generated_.insert(generated_.end(), kept.begin(), kept.end());
  pending_ = kept;
  next_position_ += static_cast<int>(tokens.size());
  if (remaining() <= 0) done_ = true;

  rec.round = static_cast<int>(transcript_.size());
  rec.committed = kept;
  metrics_.commits.push_back(static_cast<int>(kept.size()));
  if (metrics_.histogram.size() <= static_cast<std::size_t>(rec.accepted)) {
    metrics_.histogram.resize(static_cast<std::size_t>(rec.accepted) + 1, 0);
  }
  metrics_.histogram[static_cast<std::size_t>(rec.accepted)] += 1;
  metrics_.generated = static_cast<int>(generated_.size());
  transcript_.push_back(rec);
}

RoundRecord Session::chain_round() {
  NoGradGuard ng;
  if (done_ || generated_.empty()) throw StateError("chain_round: session is not active");
  const int P = next_position_;
  if (target_cache_.length() != P) throw StateError("chain_round: target cache desync");
  const double T = config_.temperature;

  std::vector<double> logits;
  const int gamma = std::min(config_.gamma, remaining() - 1);
  std::vector<int> drafts;
  std::vector<Dist> q;
  {
    flops::Scope fs;
    logits = drafter_->catch_up(pending_, iota_vec(P - static_cast<int>(pending_.size()) + 1,
                                                   static_cast<int>(pending_.size())));
    for (int i = 0; i < gamma; ++i) {
      int d;
      if (T > 0.0) {
        q.push_back(softmax_probs(logits, T));
        d = sampler_.categorical(q.back());
      } else {
        d = argmax_row(logits);
      }
      drafts.push_back(d);
      if (i + 1 < gamma) logits = drafter_->extend({d}, {P + 1 + i}, {i - 1})[0];
    }
    metrics_.draft_flops += fs.elapsed();
  }

  std::vector<int> tokens{generated_.back()};
  tokens.insert(tokens.end(), drafts.begin(), drafts.end());
  TargetOutput out;
  {
    flops::Scope fs;
    out = target_forward(target_, tokens, iota_vec(P, gamma + 1), &target_cache_, nullptr, false);
    metrics_.target_flops += fs.elapsed();
  }

  RoundRecord rec;
  rec.mode = Mode::kChain;
  rec.drafted = gamma;
  int accepted = 0, final_token = -1;
  for (int i = 0; i < gamma; ++i) {
    const auto row = row_vec(out.logits, static_cast<std::size_t>(i));
    const int d = drafts[static_cast<std::size_t>(i)];
    bool ok;
    Dist p;
    if (T == 0.0) {
      ok = d == argmax_row(row);
    } else {
      p = softmax_probs(row, T);
      const auto& qi = q[static_cast<std::size_t>(i)];
      ok = sampler_.bernoulli(accept_probability(p[static_cast<std::size_t>(d)], qi[static_cast<std::size_t>(d)]));
    }
    if (ok) {
      ++accepted;
      continue;
    }
    rec.rejection_index = i;
    final_token = T == 0.0 ? argmax_row(row)
                           : sampler_.categorical(residual_distribution(p, q[static_cast<std::size_t>(i)]));
    break;
  }
  if (rec.rejection_index < 0) final_token = sample_from_logits(row_vec(out.logits, static_cast<std::size_t>(gamma)));
  rec.accepted = accepted;

  target_cache_.truncate(P + 1 + accepted);
  {
    flops::Scope fs;
    drafter_->end_round(first_rows(out.final, accepted + 1));
    metrics_.draft_flops += fs.elapsed();
  }
  std::vector<int> committed(drafts.begin(), drafts.begin() + accepted);
  committed.push_back(final_token);
  commit(rec, committed);
  return rec;
}

DraftTree Session::build_tree(const std::vector<double>& root_logits, int budget, int depth) {
  const double T = config_.temperature > 0.0 ? config_.temperature : 1.0;
  const int P = next_position_;
  DraftTree tree;
  std::vector<Dist> dists;  // 0: root, 1 + j: node j (once expanded)
  dists.push_back(softmax_probs(root_logits, T));
  std::vector<int> frontier{-1};

  struct Candidate {
    double logp;
    int frontier_index;
    int rank;
    int token;
    double prob;
  };
  for (int level = 1; level <= depth && budget > 0 && !frontier.empty(); ++level) {
    std::vector<Candidate> cand;
    for (std::size_t fi = 0; fi < frontier.size(); ++fi) {
      const int f = frontier[fi];
      const Dist& d = dists[static_cast<std::size_t>(f + 1)];
      std::vector<int> order(d.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return d[static_cast<std::size_t>(a)] > d[static_cast<std::size_t>(b)];
      });
      const double base = f < 0 ? 0.0 : tree.nodes[static_cast<std::size_t>(f)].logp;
      for (int r = 0; r < config_.k && r < static_cast<int>(order.size()); ++r) {
        const double p = d[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
        if (!(p > 0.0)) break;
        cand.push_back({base + std::log(p), static_cast<int>(fi), r, order[static_cast<std::size_t>(r)], p});
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.logp > b.logp; });
    cand.resize(std::min<std::size_t>(cand.size(), static_cast<std::size_t>(std::min(config_.k, budget))));
    std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
      return a.frontier_index != b.frontier_index ? a.frontier_index < b.frontier_index : a.rank < b.rank;
    });
    std::vector<int> tokens, positions, parents, added;
    for (const auto& c : cand) {
      const int parent = frontier[static_cast<std::size_t>(c.frontier_index)];
      tree.nodes.push_back({c.token, parent, level, c.prob, c.logp});
      added.push_back(tree.size() - 1);
      tokens.push_back(c.token);
      positions.push_back(P + level);
      parents.push_back(parent);
    }
    budget -= static_cast<int>(cand.size());
    frontier = added;
    if (level == depth || budget <= 0 || added.empty()) break;
    const auto rows = drafter_->extend(tokens, positions, parents);
    dists.resize(static_cast<std::size_t>(tree.size()) + 1);
    for (std::size_t i = 0; i < added.size(); ++i) {
      dists[static_cast<std::size_t>(added[i]) + 1] = softmax_probs(rows[i], T);
    }
  }

  tree.child_dist.assign(static_cast<std::size_t>(tree.size()) + 1, Dist{});
  for (int parent = -1; parent < tree.size(); ++parent) {
    const auto kids = tree.children(parent);
    if (kids.empty()) continue;
    const Dist& d = dists.at(static_cast<std::size_t>(parent + 1));
    Dist qh(d.size(), 0.0);
    double s = 0.0;
    for (int c : kids) s += d[static_cast<std::size_t>(tree.nodes[static_cast<std::size_t>(c)].token)];
    for (int c : kids) {
      const auto tok = static_cast<std::size_t>(tree.nodes[static_cast<std::size_t>(c)].token);
      qh[tok] = d[tok] / s;
    }
    tree.child_dist[static_cast<std::size_t>(parent + 1)] = std::move(qh);
  }
  return tree;
}

RoundRecord Session::tree_round() {
  NoGradGuard ng;
  if (done_ || generated_.empty()) throw StateError("tree_round: session is not active");
  const int P = next_position_;
  if (target_cache_.length() != P) throw StateError("tree_round: target cache desync");
  const double T = config_.temperature;

  const int depth = std::min(config_.depth, remaining() - 1);
  const int budget = std::min({config_.max_draft_tokens, target_.config.max_seq_len - P - 1,
                               target_.config.max_seq_len - drafter_->cache_length() - 1});
  DraftTree tree;
  {
    flops::Scope fs;
    const auto root = drafter_->catch_up(pending_, iota_vec(P - static_cast<int>(pending_.size()) + 1,
                                                            static_cast<int>(pending_.size())));
    if (depth > 0) tree = build_tree(root, budget, depth);
    metrics_.draft_flops += fs.elapsed();
  }

  std::vector<int> tokens{generated_.back()}, positions{P};
  for (const auto& nd : tree.nodes) {
    tokens.push_back(nd.token);
    positions.push_back(P + nd.depth);
  }
  const auto mask = tree_attention_mask(tree, P);
  TargetOutput out;
  {
    flops::Scope fs;
    out = target_forward(target_, tokens, positions, &target_cache_, &mask, false);
    metrics_.target_flops += fs.elapsed();
  }

  RoundRecord rec;
  rec.mode = Mode::kTree;
  rec.drafted = tree.size();
  std::vector<int> path;
  int cur = -1, final_token = -1;
  while (true) {
    const auto row = row_vec(out.logits, static_cast<std::size_t>(cur + 1));
    auto kids = tree.children(cur);
    int next = -1;
    if (T == 0.0) {
      const int want = argmax_row(row);
      for (int c : kids) {
        if (tree.nodes[static_cast<std::size_t>(c)].token == want) next = c;
      }
      if (next < 0) final_token = want;
    } else {
      Dist p = softmax_probs(row, T);
      Dist qh = kids.empty() ? Dist{} : tree.child_dist[static_cast<std::size_t>(cur + 1)];
      // Candidates are visited in an order drawn from the draft distribution
      // without replacement, each against the residual left by the previous
      // rejections.
      while (!kids.empty()) {
        double mass = 0.0;
        for (double x : qh) mass += x;
        if (!(mass > 0.0)) break;
        const int tok = sampler_.categorical(qh);
        const auto it = std::find_if(kids.begin(), kids.end(), [&](int c) {
          return tree.nodes[static_cast<std::size_t>(c)].token == tok;
        });
        if (it == kids.end()) throw StateError("tree_round: sibling distribution outside the children");
        if (sampler_.bernoulli(accept_probability(p[static_cast<std::size_t>(tok)], qh[static_cast<std::size_t>(tok)]))) {
          next = *it;
          break;
        }
        p = residual_distribution(p, qh);
        qh[static_cast<std::size_t>(tok)] = 0.0;
        double s = 0.0;
        for (double x : qh) s += x;
        if (s > 0.0) {
          for (double& x : qh) x /= s;
        }
        kids.erase(it);
      }
      if (next < 0) final_token = sampler_.categorical(p);
    }
    if (next < 0) {
      if (!tree.children(cur).empty()) rec.rejection_index = static_cast<int>(path.size());
      break;
    }
    path.push_back(next);
    cur = next;
  }
  rec.accepted = static_cast<int>(path.size());

  std::vector<int> keep = iota_vec(0, P + 1), feature_rows{0};
  for (int j : path) {
    keep.push_back(P + 1 + j);
    feature_rows.push_back(1 + j);
  }
  target_cache_.compact(keep);
  {
    flops::Scope fs;
    drafter_->end_round(gather_rows(out.final, feature_rows));
    metrics_.draft_flops += fs.elapsed();
  }
  std::vector<int> committed;
  for (int j : path) committed.push_back(tree.nodes[static_cast<std::size_t>(j)].token);
  committed.push_back(final_token);
  commit(rec, committed);
  return rec;
}

void Session::run() {
  const auto t0 = std::chrono::steady_clock::now();
  while (!done_) round();
  metrics_.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string Session::transcript_jsonl() const {
  std::string s;
  for (const auto& r : transcript_) s += r.to_json() + "\n";
  return s;
}

DecodeResult decode(const TargetModel& target, const DraftModel* draft, const TokenSequence& prompt,
                    const DecodeConfig& config, Sampler& sampler) {
  std::unique_ptr<Drafter> drafter;
  if (draft) {
    drafter = std::make_unique<DreamDrafter>(*draft);
  } else {
    drafter = std::make_unique<SelfDrafter>(target);
  }
  Session s(target, std::move(drafter), config, sampler);
  s.prefill(prompt);
  s.run();
  return {s.generated(), s.metrics(), s.transcript(), s.selection()};
}

DecodeResult decode(const TargetModel& target, const DraftModel* draft, const TokenSequence& prompt,
                    const DecodeConfig& config) {
  RandomSampler sampler(config.seed);
  return decode(target, draft, prompt, config, sampler);
}

BaselineResult ar_baseline(const TargetModel& target, const TokenSequence& prompt, const DecodeConfig& config,
                           Sampler& sampler) {
  config.validate();
  NoGradGuard ng;
  const int n = static_cast<int>(prompt.size());
  if (n + config.max_new_tokens > target.config.max_seq_len) throw DimensionError("ar_baseline: sequence overflow");
  auto pick = [&](std::span<const double> row) {
    if (config.temperature == 0.0) return argmax_row(row);
    return sampler.categorical(softmax_probs(row, config.temperature));
  };
  BaselineResult res;
  KVCache cache = target.make_cache();
  flops::Scope total;
  auto out = target_forward(target, prompt.ids, iota_vec(0, n), &cache, nullptr, false);
  res.tokens.push_back(pick(out.logits.row(static_cast<std::size_t>(n - 1))));
  const auto t0 = std::chrono::steady_clock::now();
  while (static_cast<int>(res.tokens.size()) < config.max_new_tokens &&
         !(config.stop_at_eos && res.tokens.back() == task::kEos)) {
    flops::Scope step;
    const int pos = n + static_cast<int>(res.tokens.size()) - 1;
    out = target_forward(target, std::vector<int>{res.tokens.back()}, std::vector<int>{pos}, &cache, nullptr, false);
    res.tokens.push_back(pick(out.logits.row(0)));
    res.step_flops.push_back(step.elapsed());
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.flops = total.elapsed();
  return res;
}

BaselineResult ar_baseline(const TargetModel& target, const TokenSequence& prompt, const DecodeConfig& config) {
  RandomSampler sampler(config.seed);
  return ar_baseline(target, prompt, config, sampler);
}

}  // namespace dream::spec
