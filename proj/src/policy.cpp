// Copyright 2026 The mmpref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mmpref/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmpref {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'P', 'R', 'E', 'F', 'C', 'K'};

Mat gaussian(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

nlohmann::json PolicyConfig::to_json() const {
  return {{"height", height},     {"width", width},         {"d_model", d_model},
          {"n_heads", n_heads},   {"n_layers", n_layers},   {"d_ff", d_ff},
          {"image_copies", image_copies}, {"max_text_len", max_text_len}, {"init_seed", init_seed}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.image_copies = j.at("image_copies").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

int AttentionMask::count() const {
  return static_cast<int>(std::count(visible.begin(), visible.end(), true));
}

bool AttentionMask::all_visible() const {
  return std::all_of(visible.begin(), visible.end(), [](bool b) { return b; });
}

AttentionMask sample_mask(int k, double rho_th, Rng& rng) {
  if (!(rho_th >= 0.0 && rho_th <= 1.0)) throw std::invalid_argument("sample_mask: rho_th outside [0, 1]");
  if (k < 0) throw std::invalid_argument("sample_mask: negative k");
  AttentionMask m;
  m.visible.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) m.visible[static_cast<std::size_t>(i)] = uniform01(rng) >= rho_th;
  return m;
}

Policy::Policy(PolicyConfig config) : config_(config) {
  const int d = config_.d_model;
  if (d <= 0 || config_.n_heads <= 0 || d % config_.n_heads != 0)
    throw PolicyError("d_model must be a positive multiple of n_heads");
  if (config_.n_layers <= 0 || config_.d_ff <= 0 || config_.image_copies <= 0 || config_.max_text_len <= 0)
    throw PolicyError("layer, feed-forward, copy and length sizes must be positive");
  const int V = Vocab::get().size();
  const int cells = config_.height * config_.width;
  const int dh = d / config_.n_heads;
  Rng rng = substream(config_.init_seed, "policy-init");

  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  tok_emb_ = add_param("tok_emb", gaussian(V, d, 1.0, rng));
  pos_emb_ = add_param("pos_emb", gaussian(config_.max_text_len, d, 0.5, rng));
  feat_proj_ = add_param("feat_proj", gaussian(kFeatureDim, d, 1.0, rng));
  cell_emb_ = add_param("cell_emb", gaussian(cells, d, 0.5, rng));
  img_norm_ = add_param("img_norm", Mat::Ones(1, d));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerIndex li;
    li.norm1 = add_param(pre + "norm1", Mat::Ones(1, d));
    for (int h = 0; h < config_.n_heads; ++h) {
      const std::string hp = pre + "head" + std::to_string(h) + ".";
      li.wq.push_back(add_param(hp + "wq", gaussian(d, dh, proj, rng)));
      li.wk.push_back(add_param(hp + "wk", gaussian(d, dh, proj, rng)));
      li.wv.push_back(add_param(hp + "wv", gaussian(d, dh, proj, rng)));
    }
    li.wo = add_param(pre + "wo", gaussian(d, d, 0.5 * proj, rng));
    li.norm2 = add_param(pre + "norm2", Mat::Ones(1, d));
    li.w1 = add_param(pre + "w1", gaussian(d, config_.d_ff, proj, rng));
    li.w2 = add_param(pre + "w2", gaussian(config_.d_ff, d, 0.5 / std::sqrt(static_cast<double>(config_.d_ff)), rng));
    layers_.push_back(li);
  }
  final_norm_ = add_param("final_norm", Mat::Ones(1, d));
  // Zero output head: an untrained policy is exactly uniform.
  out_proj_ = add_param("out_proj", Mat::Zero(d, V));
  reward_head_ = add_param("reward_head", Mat::Zero(d, 1));
}

int Policy::add_param(std::string name, Mat value) {
  params_.push_back({std::move(name), std::move(value)});
  return static_cast<int>(params_.size() - 1);
}

std::size_t Policy::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Policy::Bound Policy::bind(Tape& tape, bool requires_grad) const {
  Bound b;
  b.reserve(params_.size());
  for (const auto& p : params_) b.push_back(tape.view(p.value, requires_grad));
  return b;
}

void Policy::check_inputs(const ToyImage& image, const AttentionMask* mask, std::span<const Token> text) const {
  const int cells = config_.height * config_.width;
  if (image.rows() != cells || image.cols() != kFeatureDim) {
    std::ostringstream os;
    os << "image shape [" << image.rows() << "x" << image.cols() << "] does not match policy grid "
       << config_.height << "x" << config_.width;
    throw PolicyError(os.str());
  }
  if (mask && mask->size() != image_tokens())
    throw PolicyError("attention mask length " + std::to_string(mask->size()) + " != k = " +
                      std::to_string(image_tokens()));
  if (text.empty()) throw PolicyError("empty text input");
  if (static_cast<int>(text.size()) > config_.max_text_len)
    throw PolicyError("text length " + std::to_string(text.size()) + " exceeds max_text_len");
  const Vocab& v = Vocab::get();
  for (Token t : text)
    if (!v.valid(t)) throw VocabError("token id " + std::to_string(t) + " outside vocabulary");
}

Tensor Policy::hidden(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                      std::span<const Token> text) const {
  check_inputs(image, mask, text);
  using ad::matmul;
  const int T = static_cast<int>(text.size());

  Tensor cells = ad::rms_norm_rows(matmul(tape.constant(image), p[feat_proj_]) + p[cell_emb_], p[img_norm_]);
  // Memory token j is cell (j mod cells); projections are taken per cell and
  // then repeated, which equals projecting the repeated embeddings.
  auto repeat = [&](Tensor t) {
    Tensor out = t;
    for (int c = 1; c < config_.image_copies; ++c) out = ad::concat_rows(out, t);
    return out;
  };

  ad::KeyLayout layout;
  layout.memory_visible = mask ? mask->visible : std::vector<bool>(static_cast<std::size_t>(image_tokens()), true);

  std::vector<int> ids(text.begin(), text.end());
  Tensor x = ad::embedding(p[tok_emb_], ids) + ad::slice_rows(p[pos_emb_], 0, T);
  for (const LayerIndex& li : layers_) {
    Tensor xn = ad::rms_norm_rows(x, p[li.norm1]);
    Tensor heads;
    for (std::size_t h = 0; h < li.wq.size(); ++h) {
      Tensor q = matmul(xn, p[li.wq[h]]);
      Tensor k = ad::concat_rows(repeat(matmul(cells, p[li.wk[h]])), matmul(xn, p[li.wk[h]]));
      Tensor v = ad::concat_rows(repeat(matmul(cells, p[li.wv[h]])), matmul(xn, p[li.wv[h]]));
      Tensor out = matmul(ad::softmax_rows(ad::masked_attention_scores(q, k, layout)), v);
      heads = h == 0 ? out : ad::concat_cols(heads, out);
    }
    x = x + matmul(heads, p[li.wo]);
    Tensor hn = ad::rms_norm_rows(x, p[li.norm2]);
    x = x + matmul(ad::relu(matmul(hn, p[li.w1])), p[li.w2]);
  }
  return ad::rms_norm_rows(x, p[final_norm_]);
}

Tensor Policy::logits(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                      std::span<const Token> text) const {
  return ad::matmul(hidden(tape, p, image, mask, text), p[out_proj_]);
}

Tensor Policy::logprob(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                       std::span<const Token> prompt, std::span<const Token> response,
                       bool length_normalize) const {
  if (prompt.empty()) throw PolicyError("logprob: empty prompt");
  if (response.empty()) throw PolicyError("logprob: empty response");
  TokenSeq text(prompt.begin(), prompt.end());
  text.insert(text.end(), response.begin(), response.end());
  const int P = static_cast<int>(prompt.size());
  const int R = static_cast<int>(response.size());
  Tensor lg = logits(tape, p, image, mask, text);
  Tensor lp = ad::log_softmax_rows(ad::slice_rows(lg, P - 1, R));
  std::vector<std::pair<int, int>> at;
  at.reserve(static_cast<std::size_t>(R));
  for (int i = 0; i < R; ++i) at.emplace_back(i, response[static_cast<std::size_t>(i)]);
  Tensor total = ad::sum(ad::pick(lp, at));
  return length_normalize ? ad::scale(total, 1.0 / R) : total;
}

Tensor Policy::reward(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                      std::span<const Token> prompt, std::span<const Token> response) const {
  TokenSeq text(prompt.begin(), prompt.end());
  text.insert(text.end(), response.begin(), response.end());
  Tensor h = hidden(tape, p, image, mask, text);
  return ad::matmul(ad::slice_rows(h, h.rows() - 1, 1), p[reward_head_]);
}

Eigen::VectorXd Policy::next_token_logits(const ToyImage& image, const AttentionMask* mask,
                                          std::span<const Token> prefix) const {
  Tape tape;
  const Bound b = bind(tape, false);
  Tensor h = hidden(tape, b, image, mask, prefix);
  Eigen::VectorXd last = h.value().row(h.rows() - 1).transpose();
  return params_[static_cast<std::size_t>(out_proj_)].value.transpose() * last;
}

Eigen::VectorXd Policy::next_token_dist(const ToyImage& image, const AttentionMask* mask,
                                        std::span<const Token> prefix) const {
  const Eigen::VectorXd lg = next_token_logits(image, mask, prefix);
  Eigen::VectorXd e = (lg.array() - lg.maxCoeff()).exp();
  return e / e.sum();
}

Mat Policy::all_token_dists(const ToyImage& image, const AttentionMask* mask, std::span<const Token> text) const {
  Tape tape;
  const Bound b = bind(tape, false);
  return ad::softmax_rows(logits(tape, b, image, mask, text)).value();
}

double Policy::logprob_value(const ToyImage& image, const AttentionMask* mask, std::span<const Token> prompt,
                             std::span<const Token> response, bool length_normalize) const {
  Tape tape;
  const Bound b = bind(tape, false);
  return logprob(tape, b, image, mask, prompt, response, length_normalize).item();
}

double Policy::reward_value(const ToyImage& image, const AttentionMask* mask, std::span<const Token> prompt,
                            std::span<const Token> response) const {
  Tape tape;
  const Bound b = bind(tape, false);
  return reward(tape, b, image, mask, prompt, response).item();
}

std::string Policy::serialize() const {
  static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes little-endian");
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params_) {
    tensors.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(double);
  }
  nlohmann::json header = {{"format", "mmpref-checkpoint"}, {"version", 1},
                           {"config", config_.to_json()}, {"tensors", std::move(tensors)}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += h;
  for (const auto& p : params_)
    out.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  return out;
}

Policy Policy::deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw PolicyError("not an mmpref checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (16 + len > bytes.size()) throw PolicyError("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  if (header.at("format") != "mmpref-checkpoint" || header.at("version") != 1)
    throw PolicyError("unsupported checkpoint format");
  Policy policy(PolicyConfig::from_json(header.at("config")));
  const auto& tensors = header.at("tensors");
  if (tensors.size() != policy.params_.size()) throw PolicyError("checkpoint tensor count mismatch");
  const std::size_t data_start = 16 + len;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = policy.params_[i];
    const auto& t = tensors[i];
    if (t.at("name") != p.name) throw PolicyError("checkpoint tensor order mismatch at " + p.name);
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
      throw PolicyError("checkpoint shape mismatch for " + p.name);
    const std::size_t off = data_start + t.at("offset").get<std::size_t>();
    const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(double);
    if (off + n > bytes.size()) throw PolicyError("truncated checkpoint data for " + p.name);
    std::memcpy(p.value.data(), bytes.data() + off, n);
  }
  return policy;
}

void Policy::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PolicyError("cannot write " + path.string());
  const std::string s = serialize();
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

Policy Policy::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PolicyError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

bool operator==(const Policy& a, const Policy& b) {
  if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i)
    if (a.params_[i].name != b.params_[i].name || a.params_[i].value != b.params_[i].value) return false;
  return true;
}

Token sample_token(const Eigen::VectorXd& dist, Rng& rng) {
  const double u = uniform01(rng) * dist.sum();
  double acc = 0.0;
  Token last_nonzero = 0;
  for (Eigen::Index i = 0; i < dist.size(); ++i) {
    if (dist(i) <= 0.0) continue;
    acc += dist(i);
    last_nonzero = static_cast<Token>(i);
    if (u < acc) return last_nonzero;
  }
  return last_nonzero;
}

Generation generate(const Policy& policy, const ToyImage& image, const AttentionMask* mask,
                    std::span<const Token> context, const GenerateOptions& options, Rng& rng) {
  if (!options.greedy && !(options.temperature > 0.0))
    throw std::invalid_argument("generate: temperature must be > 0 unless greedy");
  const Vocab& v = Vocab::get();
  TokenSeq text(context.begin(), context.end());
  Generation out;
  const int room = policy.config().max_text_len - static_cast<int>(text.size());
  const int cap = std::min(options.max_len, room);
  for (int step = 0; step < cap; ++step) {
    Eigen::VectorXd lg = policy.next_token_logits(image, mask, text);
    lg(v.eos()) += options.eos_bias;
    Token t;
    if (options.greedy) {
      Eigen::Index best;
      lg.maxCoeff(&best);
      t = static_cast<Token>(best);
    } else {
      Eigen::VectorXd z = lg / options.temperature;
      Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
      t = sample_token(e / e.sum(), rng);
    }
    out.tokens.push_back(t);
    text.push_back(t);
    if (t == v.eos() || (options.stop == StopRule::sep_or_eos && t == v.sep())) return out;
  }
  out.hit_cap = true;
  return out;
}

}  // namespace mmpref
