#include "dream/model.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "dream/errors.hpp"
#include "dream/rng.hpp"

namespace dream {

namespace {

std::map<std::string, std::string> parse_kv_lines(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ValidationError("config text missing key '" + key + "'");
  return it->second;
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor gaussian(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  SplitMix64 rng(mix_seed(seed, name_hash(name)));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.gaussian();
  return Tensor(std::move(shape), std::move(v));
}

Block make_block(const ModelConfig& c, std::uint64_t seed, const std::string& p) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const double s = c.init_std;
  const double so = c.init_std / std::sqrt(2.0 * c.target_layers);
  Block b;
  b.ln1_g = Tensor({d}, 1.0);
  b.ln1_b = Tensor({d}, 0.0);
  b.wq = gaussian({d, d}, s, seed, p + "attn.wq");
  b.wk = gaussian({d, d}, s, seed, p + "attn.wk");
  b.wv = gaussian({d, d}, s, seed, p + "attn.wv");
  b.wo = gaussian({d, d}, so, seed, p + "attn.wo");
  b.ln2_g = Tensor({d}, 1.0);
  b.ln2_b = Tensor({d}, 0.0);
  b.w1 = gaussian({d, 4 * d}, s, seed, p + "ffn.w1");
  b.b1 = Tensor({4 * d}, 0.0);
  b.w2 = gaussian({4 * d, d}, so, seed, p + "ffn.w2");
  b.b2 = Tensor({d}, 0.0);
  return b;
}

CrossBlock make_cross(const ModelConfig& c, std::uint64_t seed, const std::string& p) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const double s = c.init_std;
  CrossBlock b;
  b.ln_g = Tensor({d}, 1.0);
  b.ln_b = Tensor({d}, 0.0);
  b.wq = gaussian({d, d}, s, seed, p + "wq");
  b.wk = gaussian({d, d}, s, seed, p + "wk");
  b.wv = gaussian({d, d}, s, seed, p + "wv");
  b.wo = gaussian({d, d}, c.init_std / std::sqrt(2.0 * c.target_layers), seed, p + "wo");
  return b;
}

Tensor kv_tensor(std::span<const double> rows, int width) {
  const std::size_t n = rows.size() / static_cast<std::size_t>(width);
  return Tensor({n, static_cast<std::size_t>(width)}, std::vector<double>(rows.begin(), rows.end()));
}

// One pre-norm decoder block. When a cache is given its rows precede the
// new keys, and the new keys/values are appended to it.
Tensor block_forward(const Block& b, const Tensor& x, KVCache* cache, int layer,
                     const kernels::AttentionMask& mask, int heads, std::vector<double>* probs) {
  Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
  Tensor q = matmul(h, b.wq);
  Tensor k = matmul(h, b.wk);
  Tensor v = matmul(h, b.wv);
  Tensor keys = k, vals = v;
  if (cache) {
    const int w = cache->width();
    if (!cache->keys(layer).empty()) {
      keys = concat_rows(kv_tensor(cache->keys(layer), w), k);
      vals = concat_rows(kv_tensor(cache->values(layer), w), v);
    }
    cache->append(layer, k.values(), v.values());
  }
  Tensor a = attention(q, keys, vals, static_cast<std::size_t>(heads), mask, probs);
  Tensor x1 = add(x, matmul(a, b.wo));
  Tensor h2 = layer_norm(x1, b.ln2_g, b.ln2_b);
  return add(x1, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
}

Tensor embed(const Tensor& tok, const Tensor& pos, std::span<const int> tokens,
             std::span<const int> positions, int max_seq_len) {
  for (int p : positions) {
    if (p < 0 || p >= max_seq_len) {
      throw DimensionError("sequence overflow: position " + std::to_string(p) + " beyond max_seq_len " +
                           std::to_string(max_seq_len));
    }
  }
  return add(embedding(tok, tokens), embedding(pos, positions));
}

void load_block(Block& b, const Checkpoint& ck, const std::string& p);
void load_cross(CrossBlock& b, const Checkpoint& ck, const std::string& p);

Tensor load_tensor(const Checkpoint& ck, const std::string& name) {
  auto it = ck.find(name);
  if (it == ck.end()) throw ValidationError("checkpoint missing tensor '" + name + "'");
  return Tensor(it->second.shape, it->second.data);
}

void load_block(Block& b, const Checkpoint& ck, const std::string& p) {
  b.ln1_g = load_tensor(ck, p + "ln1.g");
  b.ln1_b = load_tensor(ck, p + "ln1.b");
  b.wq = load_tensor(ck, p + "attn.wq");
  b.wk = load_tensor(ck, p + "attn.wk");
  b.wv = load_tensor(ck, p + "attn.wv");
  b.wo = load_tensor(ck, p + "attn.wo");
  b.ln2_g = load_tensor(ck, p + "ln2.g");
  b.ln2_b = load_tensor(ck, p + "ln2.b");
  b.w1 = load_tensor(ck, p + "ffn.w1");
  b.b1 = load_tensor(ck, p + "ffn.b1");
  b.w2 = load_tensor(ck, p + "ffn.w2");
  b.b2 = load_tensor(ck, p + "ffn.b2");
}

void load_cross(CrossBlock& b, const Checkpoint& ck, const std::string& p) {
  b.ln_g = load_tensor(ck, p + "ln.g");
  b.ln_b = load_tensor(ck, p + "ln.b");
  b.wq = load_tensor(ck, p + "wq");
  b.wk = load_tensor(ck, p + "wk");
  b.wv = load_tensor(ck, p + "wv");
  b.wo = load_tensor(ck, p + "wo");
}

void store(Checkpoint& ck, const ParamStore& ps) {
  for (const auto& [name, t] : ps) {
    ck[name] = CheckpointEntry{t.shape(), std::vector<double>(t.values().begin(), t.values().end())};
  }
}

}  // namespace

// ---- config ---------------------------------------------------------------

void ModelConfig::validate(int prompt_tokens) const {
  auto bad = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (vocab_size < 2) bad("vocab_size must be >= 2");
  if (d_model <= 0 || n_heads <= 0) bad("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (target_layers < 4) bad("target_layers must be >= 4");
  if (grid_h < 0 || grid_w < 0) bad("grid extents must be non-negative");
  if (!(init_std > 0.0)) bad("init_std must be > 0");
  if (max_seq_len < prompt_tokens + visual_tokens() + 64) bad("max_seq_len must be >= q + v + 64");
}

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  o << "vocab_size=" << vocab_size << "\n"
    << "d_model=" << d_model << "\n"
    << "n_heads=" << n_heads << "\n"
    << "target_layers=" << target_layers << "\n"
    << "max_seq_len=" << max_seq_len << "\n"
    << "grid_h=" << grid_h << "\n"
    << "grid_w=" << grid_w << "\n"
    << "seed=" << seed << "\n"
    << "init_std=" << init_std << "\n";
  return o.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  const auto kv = parse_kv_lines(text);
  ModelConfig c;
  c.vocab_size = std::stoi(need(kv, "vocab_size"));
  c.d_model = std::stoi(need(kv, "d_model"));
  c.n_heads = std::stoi(need(kv, "n_heads"));
  c.target_layers = std::stoi(need(kv, "target_layers"));
  c.max_seq_len = std::stoi(need(kv, "max_seq_len"));
  c.grid_h = std::stoi(need(kv, "grid_h"));
  c.grid_w = std::stoi(need(kv, "grid_w"));
  c.seed = std::stoull(need(kv, "seed"));
  c.init_std = std::stod(need(kv, "init_std"));
  return c;
}

std::string DraftArch::to_text() const {
  std::ostringstream o;
  o << "initial_block=" << (initial_block ? 1 : 0) << "\n"
    << "cross_blocks=" << cross_blocks << "\n"
    << "final_block=" << (final_block ? 1 : 0) << "\n";
  return o.str();
}

DraftArch DraftArch::from_text(const std::string& text) {
  const auto kv = parse_kv_lines(text);
  DraftArch a;
  a.initial_block = std::stoi(need(kv, "initial_block")) != 0;
  a.cross_blocks = std::stoi(need(kv, "cross_blocks"));
  a.final_block = std::stoi(need(kv, "final_block")) != 0;
  return a;
}

// ---- cache ----------------------------------------------------------------

KVCache::KVCache(int layers, int width, int capacity)
    : width_(width), capacity_(capacity), k_(static_cast<std::size_t>(layers)), v_(static_cast<std::size_t>(layers)) {}

int KVCache::length() const {
  if (k_.empty()) return 0;
  return static_cast<int>(k_[0].size() / static_cast<std::size_t>(width_));
}

void KVCache::append(int layer, std::span<const double> k, std::span<const double> v) {
  auto& kl = k_.at(static_cast<std::size_t>(layer));
  auto& vl = v_.at(static_cast<std::size_t>(layer));
  if (k.size() != v.size() || k.size() % static_cast<std::size_t>(width_) != 0) {
    throw DimensionError("kv cache: appended rows do not match width");
  }
  if ((kl.size() + k.size()) / static_cast<std::size_t>(width_) > static_cast<std::size_t>(capacity_)) {
    throw DimensionError("kv cache: sequence overflow beyond capacity " + std::to_string(capacity_));
  }
  kl.insert(kl.end(), k.begin(), k.end());
  vl.insert(vl.end(), v.begin(), v.end());
}

void KVCache::truncate(int n) {
  if (n < 0) throw ParameterError("kv cache: negative length");
  const auto keep = static_cast<std::size_t>(n) * static_cast<std::size_t>(width_);
  for (std::size_t l = 0; l < k_.size(); ++l) {
    if (k_[l].size() < keep) throw StateError("kv cache: truncate beyond current length");
    k_[l].resize(keep);
    v_[l].resize(keep);
  }
}

void KVCache::compact(std::span<const int> keep) {
  const auto w = static_cast<std::size_t>(width_);
  const int len = length();
  int last = -1;
  for (int r : keep) {
    if (r <= last || r >= len) throw ValidationError("kv cache: compaction rows must ascend within length");
    last = r;
  }
  for (std::size_t l = 0; l < k_.size(); ++l) {
    std::size_t dst = 0;
    for (int r : keep) {
      const std::size_t src = static_cast<std::size_t>(r) * w;
      if (src != dst) {
        std::copy(k_[l].begin() + static_cast<long>(src), k_[l].begin() + static_cast<long>(src + w),
                  k_[l].begin() + static_cast<long>(dst));
        std::copy(v_[l].begin() + static_cast<long>(src), v_[l].begin() + static_cast<long>(src + w),
                  v_[l].begin() + static_cast<long>(dst));
      }
      dst += w;
    }
    k_[l].resize(dst);
    v_[l].resize(dst);
  }
}

// ---- parameters -------------------------------------------------------------

void Block::register_params(ParamStore& ps, const std::string& p) const {
  ps.add(p + "ln1.g", ln1_g);
  ps.add(p + "ln1.b", ln1_b);
  ps.add(p + "attn.wq", wq);
  ps.add(p + "attn.wk", wk);
  ps.add(p + "attn.wv", wv);
  ps.add(p + "attn.wo", wo);
  ps.add(p + "ln2.g", ln2_g);
  ps.add(p + "ln2.b", ln2_b);
  ps.add(p + "ffn.w1", w1);
  ps.add(p + "ffn.b1", b1);
  ps.add(p + "ffn.w2", w2);
  ps.add(p + "ffn.b2", b2);
}

void CrossBlock::register_params(ParamStore& ps, const std::string& p) const {
  ps.add(p + "ln.g", ln_g);
  ps.add(p + "ln.b", ln_b);
  ps.add(p + "wq", wq);
  ps.add(p + "wk", wk);
  ps.add(p + "wv", wv);
  ps.add(p + "wo", wo);
}

ParamStore TargetModel::params() const {
  ParamStore ps;
  ps.add("tok_emb", tok_emb);
  ps.add("pos_emb", pos_emb);
  ps.add("lnf.g", lnf_g);
  ps.add("lnf.b", lnf_b);
  ps.add("lm_head", lm_head);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].register_params(ps, "blocks." + std::to_string(i) + ".");
  }
  return ps;
}

KVCache TargetModel::make_cache() const {
  return KVCache(static_cast<int>(blocks.size()), config.d_model, config.max_seq_len);
}

Checkpoint TargetModel::to_checkpoint() const {
  Checkpoint ck;
  store(ck, params());
  ck["config"] = text_entry(config.to_text());
  return ck;
}

TargetModel TargetModel::from_checkpoint(const Checkpoint& ck) {
  auto it = ck.find("config");
  if (it == ck.end()) throw ValidationError("target checkpoint has no config entry");
  TargetModel m;
  m.config = ModelConfig::from_text(entry_text(it->second));
  m.tok_emb = load_tensor(ck, "tok_emb");
  m.pos_emb = load_tensor(ck, "pos_emb");
  m.lnf_g = load_tensor(ck, "lnf.g");
  m.lnf_b = load_tensor(ck, "lnf.b");
  m.lm_head = load_tensor(ck, "lm_head");
  m.blocks.resize(static_cast<std::size_t>(m.config.target_layers));
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    load_block(m.blocks[i], ck, "blocks." + std::to_string(i) + ".");
  }
  return m;
}

ParamStore DraftModel::params() const {
  ParamStore ps;
  if (initial) initial->register_params(ps, "initial.");
  for (std::size_t i = 0; i < cross.size(); ++i) cross[i].register_params(ps, "cross." + std::to_string(i) + ".");
  if (final) final->register_params(ps, "final.");
  ps.add("norm.g", lnf_g);
  ps.add("norm.b", lnf_b);
  return ps;
}

KVCache DraftModel::make_cache() const {
  const int layers = (initial ? 1 : 0) + (final ? 1 : 0);
  return KVCache(layers, config.d_model, config.max_seq_len);
}

Checkpoint DraftModel::to_checkpoint() const {
  Checkpoint ck;
  store(ck, params());
  ck["config"] = text_entry(config.to_text());
  ck["arch"] = text_entry(arch.to_text());
  return ck;
}

DraftModel DraftModel::from_checkpoint(const Checkpoint& ck, const TargetModel& target) {
  auto c = ck.find("config");
  auto a = ck.find("arch");
  if (c == ck.end() || a == ck.end()) throw ValidationError("draft checkpoint lacks config/arch entries");
  DraftModel m;
  m.config = ModelConfig::from_text(entry_text(c->second));
  if (!(m.config == target.config)) throw ValidationError("draft checkpoint config differs from target config");
  m.arch = DraftArch::from_text(entry_text(a->second));
  m.tok_emb = target.tok_emb;
  m.pos_emb = target.pos_emb;
  m.lm_head = target.lm_head;
  if (m.arch.initial_block) {
    m.initial.emplace();
    load_block(*m.initial, ck, "initial.");
  }
  m.cross.resize(static_cast<std::size_t>(m.arch.cross_blocks));
  for (std::size_t i = 0; i < m.cross.size(); ++i) load_cross(m.cross[i], ck, "cross." + std::to_string(i) + ".");
  if (m.arch.final_block) {
    m.final.emplace();
    load_block(*m.final, ck, "final.");
  }
  m.lnf_g = load_tensor(ck, "norm.g");
  m.lnf_b = load_tensor(ck, "norm.b");
  return m;
}

// ---- initialization ---------------------------------------------------------

DraftModel init_draft(const TargetModel& target, const DraftArch& arch, std::uint64_t seed) {
  if (arch.cross_blocks < 0) throw ValidationError("draft arch: cross_blocks must be >= 0");
  if (!arch.initial_block && !arch.final_block) {
    throw ValidationError("draft arch: needs at least one decoder block");
  }
  const auto& c = target.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  DraftModel m;
  m.config = c;
  m.arch = arch;
  m.tok_emb = target.tok_emb;
  m.pos_emb = target.pos_emb;
  m.lm_head = target.lm_head;
  if (arch.initial_block) m.initial = make_block(c, seed, "draft.initial.");
  for (int i = 0; i < arch.cross_blocks; ++i) {
    m.cross.push_back(make_cross(c, seed, "draft.cross." + std::to_string(i) + "."));
  }
  if (arch.final_block) m.final = make_block(c, seed, "draft.final.");
  m.lnf_g = Tensor({d}, 1.0);
  m.lnf_b = Tensor({d}, 0.0);
  return m;
}

ModelPair init_models(const ModelConfig& c, const DraftArch& arch) {
  if (c.d_model <= 0 || c.n_heads <= 0 || c.d_model % c.n_heads != 0) {
    throw ValidationError("model config: d_model must be a positive multiple of n_heads");
  }
  if (c.vocab_size < 2 || c.target_layers < 1 || c.max_seq_len < 1 || !(c.init_std > 0.0)) {
    throw ValidationError("model config: invalid extents");
  }
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  TargetModel t;
  t.config = c;
  t.tok_emb = gaussian({vocab, d}, c.init_std, c.seed, "tok_emb");
  t.pos_emb = gaussian({static_cast<std::size_t>(c.max_seq_len), d}, c.init_std, c.seed, "pos_emb");
  for (int i = 0; i < c.target_layers; ++i) {
    t.blocks.push_back(make_block(c, c.seed, "blocks." + std::to_string(i) + "."));
  }
  t.lnf_g = Tensor({d}, 1.0);
  t.lnf_b = Tensor({d}, 0.0);
  t.lm_head = gaussian({d, vocab}, c.init_std, c.seed, "lm_head");
  DraftModel dm = init_draft(t, arch, c.seed);
  return ModelPair{std::move(t), std::move(dm)};
}

// ---- forward passes ---------------------------------------------------------

TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens,
                            std::span<const int> positions, KVCache* cache,
                            const kernels::AttentionMask* mask, bool trace) {
  if (tokens.empty()) throw DimensionError("target_forward: no tokens");
  if (positions.size() != tokens.size()) throw DimensionError("target_forward: one position per token");
  const int n = static_cast<int>(tokens.size());
  const int past = cache ? cache->length() : 0;
  if (cache && past + n > cache->capacity()) {
    throw DimensionError("sequence overflow: " + std::to_string(past + n) + " rows exceed max_seq_len " +
                         std::to_string(cache->capacity()));
  }
  const kernels::AttentionMask causal = kernels::AttentionMask::causal(n, past);
  const kernels::AttentionMask& m = mask ? *mask : causal;
  const int heads = model.config.n_heads;

  TargetOutput out;
  Tensor x = embed(model.tok_emb, model.pos_emb, tokens, positions, model.config.max_seq_len);
  if (trace) {
    out.trace.emplace();
    out.trace->rows = n;
    out.trace->keys = past + n;
    out.trace->heads = heads;
    out.trace->hidden.push_back(x);
  }
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    std::vector<double>* probs = nullptr;
    if (trace) probs = &out.trace->attn.emplace_back();
    x = block_forward(model.blocks[i], x, cache, static_cast<int>(i), m, heads, probs);
    if (trace) out.trace->hidden.push_back(x);
  }
  out.final = layer_norm(x, model.lnf_g, model.lnf_b);
  if (trace) out.trace->final = out.final;
  out.logits = matmul(out.final, model.lm_head);
  return out;
}

TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens, KVCache* cache,
                            bool trace) {
  const int past = cache ? cache->length() : 0;
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = past + static_cast<int>(i);
  return target_forward(model, tokens, pos, cache, nullptr, trace);
}

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

std::vector<int> greedy_continuation(const TargetModel& model, std::span<const int> prompt, int max_new,
                                     int stop_token) {
  NoGradGuard ng;
  KVCache cache = model.make_cache();
  std::vector<int> out;
  if (max_new <= 0) return out;
  Tensor logits = target_forward(model, prompt, &cache).logits;
  int next = argmax_row(logits.row(logits.rows() - 1));
  out.push_back(next);
  while (static_cast<int>(out.size()) < max_new && next != stop_token) {
    const int tok[1] = {next};
    logits = target_forward(model, tok, &cache).logits;
    next = argmax_row(logits.row(0));
    out.push_back(next);
  }
  return out;
}

BankKV project_bank(const DraftModel& model, const Tensor& bank_rows) {
  BankKV kv;
  for (const auto& blk : model.cross) {
    if (bank_rows.rows() == 0) {
      kv.k.emplace_back(Shape{0, static_cast<std::size_t>(model.config.d_model)});
      kv.v.emplace_back(Shape{0, static_cast<std::size_t>(model.config.d_model)});
      continue;
    }
    if (bank_rows.cols() != blk.wk.rows()) throw DimensionError("bank width differs from draft width");
    kv.k.push_back(matmul(bank_rows, blk.wk));
    kv.v.push_back(matmul(bank_rows, blk.wv));
  }
  return kv;
}

BankKV concat_bank(const BankKV& a, const BankKV& b) {
  if (a.k.size() != b.k.size()) throw DimensionError("concat_bank: block count mismatch");
  BankKV out;
  for (std::size_t i = 0; i < a.k.size(); ++i) {
    if (a.k[i].rows() == 0) {
      out.k.push_back(b.k[i]);
      out.v.push_back(b.v[i]);
    } else if (b.k[i].rows() == 0) {
      out.k.push_back(a.k[i]);
      out.v.push_back(a.v[i]);
    } else {
      out.k.push_back(concat_rows(a.k[i], b.k[i]));
      out.v.push_back(concat_rows(a.v[i], b.v[i]));
    }
  }
  return out;
}

Tensor cross_attention_fuse(const CrossBlock& blk, const Tensor& e1, const Tensor& bank_k,
                            const Tensor& bank_v, int heads, const kernels::AttentionMask& bank_mask,
                            std::vector<double>* probs) {
  if (e1.cols() != blk.wq.rows() || bank_k.cols() != e1.cols()) {
    throw DimensionError("cross_attention_fuse: query and bank widths differ");
  }
  Tensor q = matmul(layer_norm(e1, blk.ln_g, blk.ln_b), blk.wq);
  Tensor k = bank_k, v = bank_v;
  if (k.rows() == 0) {
    // Empty bank: every row sees nothing. Feed one dummy key so the
    // attention kernel has a valid key buffer; the mask hides it.
    k = Tensor({1, e1.cols()}, 0.0);
    v = Tensor({1, e1.cols()}, 0.0);
  }
  Tensor f = attention(q, k, v, static_cast<std::size_t>(heads), bank_mask, probs);
  return matmul(f, blk.wo);
}

DraftOutput draft_forward(const DraftModel& model, std::span<const int> tokens,
                          std::span<const int> positions, KVCache* cache, const BankKV& bank,
                          const kernels::AttentionMask* self_mask,
                          const kernels::AttentionMask* bank_mask) {
  if (tokens.empty()) throw DimensionError("draft_forward: no tokens");
  if (positions.size() != tokens.size()) throw DimensionError("draft_forward: one position per token");
  const int n = static_cast<int>(tokens.size());
  const int past = cache ? cache->length() : 0;
  if (cache && past + n > cache->capacity()) throw DimensionError("sequence overflow in draft cache");
  const int heads = model.config.n_heads;

  const kernels::AttentionMask causal = kernels::AttentionMask::causal(n, past);
  const kernels::AttentionMask& sm = self_mask ? *self_mask : causal;
  // Teacher-forced default: row i sees bank rows strictly before its position.
  kernels::AttentionMask bank_default;
  if (!bank_mask) {
    bank_default.prefix.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      bank_default.prefix[static_cast<std::size_t>(i)] = std::min(past + i, bank.rows());
    }
  }
  const kernels::AttentionMask& bm = bank_mask ? *bank_mask : bank_default;

  DraftOutput out;
  Tensor x = embed(model.tok_emb, model.pos_emb, tokens, positions, model.config.max_seq_len);
  int layer = 0;
  if (model.initial) x = block_forward(*model.initial, x, cache, layer++, sm, heads, nullptr);
  out.e1 = x;
  for (std::size_t i = 0; i < model.cross.size(); ++i) {
    x = add(x, cross_attention_fuse(model.cross[i], x, bank.k.at(i), bank.v.at(i), heads, bm));
  }
  if (model.final) x = block_forward(*model.final, x, cache, layer++, sm, heads, nullptr);
  out.em = layer_norm(x, model.lnf_g, model.lnf_b);
  out.logits = matmul(out.em, model.lm_head);
  return out;
}

}  // namespace dream
