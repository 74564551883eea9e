#include "kriformer/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "kriformer/errors.hpp"

namespace kriformer {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'K', 'R', 'F', 'M', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = uniform_range(rng, -limit, limit);
  return Tensor::from_data({fan_in, fan_out}, std::move(v), true);
}

AttentionBlockParams init_block(Rng& rng, std::size_t d, std::size_t heads) {
  AttentionBlockParams p;
  const std::size_t hd = d / heads;
  for (std::size_t h = 0; h < heads; ++h) p.wq.push_back(init_weight(rng, d, hd));
  for (std::size_t h = 0; h < heads; ++h) p.wk.push_back(init_weight(rng, d, hd));
  for (std::size_t h = 0; h < heads; ++h) p.wv.push_back(init_weight(rng, d, hd));
  p.wo = init_weight(rng, d, d);
  p.ln_gamma = Tensor::full({d}, 1.0, true);
  p.ln_beta = Tensor::zeros({d}, true);
  return p;
}

FfnParams init_ffn(Rng& rng, std::size_t d) {
  FfnParams p;
  p.w1 = init_weight(rng, d, d);
  p.b1 = Tensor::zeros({d}, true);
  p.w2 = init_weight(rng, d, d);
  p.b2 = Tensor::zeros({d}, true);
  p.ln_gamma = Tensor::full({d}, 1.0, true);
  p.ln_beta = Tensor::zeros({d}, true);
  return p;
}

void collect_block(const std::string& prefix, AttentionBlockParams& p,
                   std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t h = 0; h < p.wq.size(); ++h)
    out.emplace_back(prefix + ".wq." + std::to_string(h), p.wq[h]);
  for (std::size_t h = 0; h < p.wk.size(); ++h)
    out.emplace_back(prefix + ".wk." + std::to_string(h), p.wk[h]);
  for (std::size_t h = 0; h < p.wv.size(); ++h)
    out.emplace_back(prefix + ".wv." + std::to_string(h), p.wv[h]);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".ln_gamma", p.ln_gamma);
  out.emplace_back(prefix + ".ln_beta", p.ln_beta);
}

void collect_ffn(const std::string& prefix, FfnParams& p,
                 std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".w1", p.w1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".w2", p.w2);
  out.emplace_back(prefix + ".b2", p.b2);
  out.emplace_back(prefix + ".ln_gamma", p.ln_gamma);
  out.emplace_back(prefix + ".ln_beta", p.ln_beta);
}

Tensor clone_tensor(const Tensor& t) {
  if (!t.defined()) return Tensor();
  return Tensor::from_data(t.shape(), t.values(), t.requires_grad());
}

AttentionBlockParams clone_block(const AttentionBlockParams& p) {
  AttentionBlockParams out;
  for (const Tensor& t : p.wq) out.wq.push_back(clone_tensor(t));
  for (const Tensor& t : p.wk) out.wk.push_back(clone_tensor(t));
  for (const Tensor& t : p.wv) out.wv.push_back(clone_tensor(t));
  out.wo = clone_tensor(p.wo);
  out.ln_gamma = clone_tensor(p.ln_gamma);
  out.ln_beta = clone_tensor(p.ln_beta);
  return out;
}

FfnParams clone_ffn(const FfnParams& p) {
  FfnParams out;
  out.w1 = clone_tensor(p.w1);
  out.b1 = clone_tensor(p.b1);
  out.w2 = clone_tensor(p.w2);
  out.b2 = clone_tensor(p.b2);
  out.ln_gamma = clone_tensor(p.ln_gamma);
  out.ln_beta = clone_tensor(p.ln_beta);
  return out;
}

// ---- little-endian byte stream helpers ----

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct ByteReader {
  const std::string& data;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > data.size())
      throw DataError("checkpoint: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  return hash;
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(out, d);
  for (double v : t.values()) put_f64(out, v);
}

Tensor read_tensor(ByteReader& r, std::string& name, bool requires_grad) {
  name = r.bytes(r.u16());
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw DataError("checkpoint: implausible tensor rank");
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = r.u64();
    numel *= shape[i];
  }
  if (numel > (1ull << 30)) throw DataError("checkpoint: implausible tensor size");
  std::vector<double> values(numel);
  for (std::size_t i = 0; i < numel; ++i) values[i] = r.f64();
  return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

AblationFlags ablation_from_name(const std::string& variant) {
  AblationFlags f;
  if (variant == "none" || variant.empty()) return f;
  if (variant == "no_TE") f.no_te = true;
  else if (variant == "no_SE") f.no_se = true;
  else if (variant == "no_STE") f.no_ste = true;
  else if (variant == "no_MTA") f.no_mta = true;
  else if (variant == "no_MSA") f.no_msa = true;
  else if (variant == "no_MSIA") f.no_msia = true;
  else
    throw ParamError("unknown ablation variant '" + variant + "'");
  return f;
}

std::string ablation_name(const AblationFlags& f) {
  if (f.no_te) return "no_TE";
  if (f.no_se) return "no_SE";
  if (f.no_ste) return "no_STE";
  if (f.no_mta) return "no_MTA";
  if (f.no_msa) return "no_MSA";
  if (f.no_msia) return "no_MSIA";
  return "none";
}

const std::vector<std::string>& ablation_variant_names() {
  static const std::vector<std::string> names = {"no_TE",  "no_SE",  "no_STE",
                                                 "no_MTA", "no_MSA", "no_MSIA"};
  return names;
}

SpatialContext make_spatial_context(const SensorGraph& graph,
                                    std::size_t eigen_dim, bool literal_eq6) {
  const std::size_t n = graph.size();
  if (n < 2) throw ParamError("make_spatial_context: at least two nodes required");
  const std::size_t k = eigen_dim > 0 ? eigen_dim : std::min<std::size_t>(16, n - 1);
  Tensor adj = symmetrize(build_adjacency(graph, literal_eq6));
  if (connected_components(adj) > 1)
    std::fprintf(stderr,
                 "warning: symmetrized sensor graph is disconnected; "
                 "eigenmap features remain well-defined\n");
  SpectralData spectral = eigendecompose(normalized_laplacian(adj));
  SpatialContext ctx;
  ctx.se_raw = spatial_eigenmap(spectral, k);
  ctx.spatial_mask = spatial_mask_from_adjacency(adj);
  ctx.fingerprint = graph_fingerprint(graph);
  return ctx;
}

KriformerModel init_model(const ModelHyper& hyper, const SpatialContext& ctx,
                          std::uint64_t seed) {
  if (hyper.model_dim == 0 || hyper.heads == 0)
    throw ParamError("init_model: model_dim and heads must be positive");
  if (hyper.model_dim % hyper.heads != 0)
    throw ParamError("init_model: heads (" + std::to_string(hyper.heads) +
                     ") must divide model_dim (" +
                     std::to_string(hyper.model_dim) + ")");
  if (hyper.model_dim % 2 != 0)
    throw ParamError("init_model: model_dim must be even for the temporal embedding");
  if (hyper.encoder_layers < 1 || hyper.decoder_layers < 1)
    throw ParamError("init_model: at least one encoder and one decoder layer");
  if (!(hyper.dropout >= 0.0 && hyper.dropout < 1.0))
    throw ParamError("init_model: dropout must lie in [0, 1)");
  if (hyper.channels == 0) throw ParamError("init_model: channels must be positive");
  if (!ctx.se_raw.defined() || ctx.se_raw.rank() != 2)
    throw ParamError("init_model: spatial context missing eigenmap features");

  const std::size_t d = hyper.model_dim;
  const std::size_t k = ctx.se_raw.shape()[1];
  const std::size_t n = ctx.se_raw.shape()[0];
  if (ctx.spatial_mask.shape() != Shape{n, n})
    throw ShapeError("init_model: spatial mask must be N x N");

  KriformerModel m;
  m.hyper = hyper;
  m.hyper.eigen_dim = k;
  m.se_raw = clone_tensor(ctx.se_raw);
  m.spatial_mask = clone_tensor(ctx.spatial_mask);
  m.graph_fingerprint = ctx.fingerprint;

  Rng rng(seed);
  m.input_weight = init_weight(rng, hyper.channels, d);
  m.input_bias = Tensor::zeros({d}, true);
  m.output_weight = init_weight(rng, hyper.channels, d);
  m.output_bias = Tensor::zeros({d}, true);

  m.ste.model_dim = d;
  m.ste.eigen_dim = k;
  m.ste.merge_mode = hyper.merge_mode;
  m.ste.se_weight = init_weight(rng, k, d);
  m.ste.se_bias = Tensor::zeros({d}, true);
  const std::size_t ste_in = hyper.merge_mode == MergeMode::concat ? 2 * d : d;
  m.ste.ste_weight = init_weight(rng, ste_in, d);
  m.ste.ste_bias = Tensor::zeros({d}, true);

  for (std::size_t l = 0; l < hyper.encoder_layers; ++l) {
    EncoderLayerParams layer;
    layer.mta = init_block(rng, d, hyper.heads);
    layer.msa = init_block(rng, d, hyper.heads);
    layer.ffn = init_ffn(rng, d);
    m.encoder.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < hyper.decoder_layers; ++l) {
    DecoderLayerParams layer;
    layer.mta = init_block(rng, d, hyper.heads);
    layer.msa = init_block(rng, d, hyper.heads);
    layer.msia = init_block(rng, d, hyper.heads);
    layer.ffn = init_ffn(rng, d);
    m.decoder.push_back(std::move(layer));
  }

  m.final_weight = init_weight(rng, d, hyper.channels);
  m.final_bias = Tensor::zeros({hyper.channels}, true);
  return m;
}

std::vector<std::pair<std::string, Tensor>> KriformerModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("input.weight", input_weight);
  out.emplace_back("input.bias", input_bias);
  out.emplace_back("output.weight", output_weight);
  out.emplace_back("output.bias", output_bias);
  out.emplace_back("ste.se_weight", ste.se_weight);
  out.emplace_back("ste.se_bias", ste.se_bias);
  out.emplace_back("ste.ste_weight", ste.ste_weight);
  out.emplace_back("ste.ste_bias", ste.ste_bias);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    collect_block(prefix + ".mta", encoder[l].mta, out);
    collect_block(prefix + ".msa", encoder[l].msa, out);
    collect_ffn(prefix + ".ffn", encoder[l].ffn, out);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string prefix = "decoder." + std::to_string(l);
    collect_block(prefix + ".mta", decoder[l].mta, out);
    collect_block(prefix + ".msa", decoder[l].msa, out);
    collect_block(prefix + ".msia", decoder[l].msia, out);
    collect_ffn(prefix + ".ffn", decoder[l].ffn, out);
  }
  out.emplace_back("final.weight", final_weight);
  out.emplace_back("final.bias", final_bias);
  return out;
}

std::vector<Tensor> KriformerModel::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, tensor] : named_parameters()) out.push_back(tensor);
  return out;
}

std::size_t parameter_count(const ModelHyper& hyper, std::size_t eigen_dim) {
  const std::size_t d = hyper.model_dim;
  const std::size_t c = hyper.channels;
  const std::size_t attention = 4 * d * d + 2 * d;
  const std::size_t ffn = 2 * d * d + 4 * d;
  const std::size_t encoder_layer = 2 * attention + ffn;
  const std::size_t decoder_layer = 3 * attention + ffn;
  const std::size_t ste_in = hyper.merge_mode == MergeMode::concat ? 2 * d : d;
  return 2 * (c * d + d)                      // input + output embeddings
         + (eigen_dim * d + d)                // se projection
         + (ste_in * d + d)                   // ste projection
         + hyper.encoder_layers * encoder_layer
         + hyper.decoder_layers * decoder_layer
         + d * c + c;                         // final head
}

Tensor forward(const KriformerModel& model, const Tensor& x, bool training,
               Rng* rng) {
  // T x N x C for a single window, or B x T x N x C for a batch of windows.
  if (!x.defined() || (x.rank() != 3 && x.rank() != 4))
    throw ShapeError("forward: input must be [B x] T x N x C");
  const std::size_t t_len = x.shape()[x.rank() - 3];
  const std::size_t n = x.shape()[x.rank() - 2];
  if (n != model.nodes())
    throw ShapeError("forward: input has " + std::to_string(n) +
                     " nodes but the model graph has " +
                     std::to_string(model.nodes()));
  if (x.shape().back() != model.hyper.channels)
    throw ShapeError("forward: channel mismatch");
  if (training && rng == nullptr)
    throw ParamError("forward: training mode needs an rng for dropout");

  const DropoutCtx dropout =
      training ? DropoutCtx{model.hyper.dropout, rng} : DropoutCtx{};
  const AblationFlags& ab = model.ablation;
  const std::size_t d = model.hyper.model_dim;

  Tensor ste;
  if (!ab.no_ste) {
    Tensor te = ab.no_te ? Tensor::zeros({t_len, d}) : temporal_embedding(t_len, d);
    Tensor se = ab.no_se ? Tensor::zeros({n, d})
                         : project_spatial(model.se_raw, model.ste);
    ste = merge_ste(te, se, model.ste);
  }

  Tensor enc = add(matmul(x, model.input_weight), model.input_bias);
  if (ste.defined()) enc = add(enc, ste);
  for (const EncoderLayerParams& layer : model.encoder) {
    if (!ab.no_mta) enc = mta(enc, layer.mta, dropout);
    if (!ab.no_msa) enc = msa(enc, model.spatial_mask, layer.msa, dropout);
    enc = ffn(enc, layer.ffn, dropout);
  }

  Tensor dec = add(matmul(x, model.output_weight), model.output_bias);
  if (ste.defined()) dec = add(dec, ste);
  for (const DecoderLayerParams& layer : model.decoder) {
    if (!ab.no_mta) dec = mta(dec, layer.mta, dropout);
    if (!ab.no_msa) dec = msa(dec, model.spatial_mask, layer.msa, dropout);
    if (!ab.no_msia) dec = msia(dec, enc, layer.msia, dropout);
    dec = ffn(dec, layer.ffn, dropout);
  }

  return add(matmul(dec, model.final_weight), model.final_bias);
}

KriformerModel clone_model(const KriformerModel& model) {
  KriformerModel out;
  out.hyper = model.hyper;
  out.ablation = model.ablation;
  out.input_weight = clone_tensor(model.input_weight);
  out.input_bias = clone_tensor(model.input_bias);
  out.output_weight = clone_tensor(model.output_weight);
  out.output_bias = clone_tensor(model.output_bias);
  out.ste.model_dim = model.ste.model_dim;
  out.ste.eigen_dim = model.ste.eigen_dim;
  out.ste.merge_mode = model.ste.merge_mode;
  out.ste.se_weight = clone_tensor(model.ste.se_weight);
  out.ste.se_bias = clone_tensor(model.ste.se_bias);
  out.ste.ste_weight = clone_tensor(model.ste.ste_weight);
  out.ste.ste_bias = clone_tensor(model.ste.ste_bias);
  for (const EncoderLayerParams& layer : model.encoder)
    out.encoder.push_back(
        {clone_block(layer.mta), clone_block(layer.msa), clone_ffn(layer.ffn)});
  for (const DecoderLayerParams& layer : model.decoder)
    out.decoder.push_back({clone_block(layer.mta), clone_block(layer.msa),
                           clone_block(layer.msia), clone_ffn(layer.ffn)});
  out.final_weight = clone_tensor(model.final_weight);
  out.final_bias = clone_tensor(model.final_bias);
  out.se_raw = clone_tensor(model.se_raw);
  out.spatial_mask = clone_tensor(model.spatial_mask);
  out.graph_fingerprint = model.graph_fingerprint;
  out.norm_mean = model.norm_mean;
  out.norm_std = model.norm_std;
  out.provenance_json = model.provenance_json;
  return out;
}

KriformerModel apply_ablation(const KriformerModel& model,
                              const std::string& variant) {
  KriformerModel out = clone_model(model);
  out.ablation = ablation_from_name(variant);
  return out;
}

void save_checkpoint(const KriformerModel& model, const std::string& path) {
  json meta;
  meta["channels"] = model.hyper.channels;
  meta["model_dim"] = model.hyper.model_dim;
  meta["heads"] = model.hyper.heads;
  meta["encoder_layers"] = model.hyper.encoder_layers;
  meta["decoder_layers"] = model.hyper.decoder_layers;
  meta["dropout"] = model.hyper.dropout;
  meta["eigen_dim"] = model.hyper.eigen_dim;
  meta["merge_mode"] = merge_mode_name(model.hyper.merge_mode);
  meta["ablation"] = ablation_name(model.ablation);
  if (!model.provenance_json.empty())
    meta["provenance"] = json::parse(model.provenance_json);

  std::string payload;
  payload.append(kMagic, sizeof(kMagic));
  put_u32(payload, kCheckpointVersion);
  const std::string meta_str = meta.dump();
  put_u64(payload, meta_str.size());
  payload.append(meta_str);
  put_u64(payload, model.graph_fingerprint);
  put_f64(payload, model.norm_mean);
  put_f64(payload, model.norm_std);

  auto named = const_cast<KriformerModel&>(model).named_parameters();
  put_u32(payload, static_cast<std::uint32_t>(named.size() + 2));
  for (auto& [name, tensor] : named) put_tensor(payload, name, tensor);
  put_tensor(payload, "buffer.se_raw", model.se_raw);
  put_tensor(payload, "buffer.spatial_mask", model.spatial_mask);
  put_u64(payload, fnv1a(payload));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_checkpoint: cannot open '" + tmp + "'");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("save_checkpoint: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("save_checkpoint: cannot move '" + tmp + "' into place");
}

KriformerModel load_checkpoint(const std::string& path) {
  std::string data;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open '" + path + "'");
    data.assign(std::istreambuf_iterator<char>(in),
                std::istreambuf_iterator<char>());
  }
  if (data.size() < sizeof(kMagic) + 12)
    throw DataError("load_checkpoint: truncated file");
  if (std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("load_checkpoint: not a kriformer checkpoint");
  const std::string body = data.substr(0, data.size() - 8);
  ByteReader tail{data, data.size() - 8};
  if (tail.u64() != fnv1a(body))
    throw DataError("load_checkpoint: checksum mismatch (corrupt file)");

  ByteReader r{data, sizeof(kMagic)};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("load_checkpoint: unsupported version " +
                    std::to_string(version));
  const std::uint64_t meta_len = r.u64();
  json meta = json::parse(r.bytes(meta_len));

  KriformerModel m;
  m.hyper.channels = meta.at("channels").get<std::size_t>();
  m.hyper.model_dim = meta.at("model_dim").get<std::size_t>();
  m.hyper.heads = meta.at("heads").get<std::size_t>();
  m.hyper.encoder_layers = meta.at("encoder_layers").get<std::size_t>();
  m.hyper.decoder_layers = meta.at("decoder_layers").get<std::size_t>();
  m.hyper.dropout = meta.at("dropout").get<double>();
  m.hyper.eigen_dim = meta.at("eigen_dim").get<std::size_t>();
  m.hyper.merge_mode = merge_mode_from_string(meta.at("merge_mode").get<std::string>());
  m.ablation = ablation_from_name(meta.at("ablation").get<std::string>());
  if (meta.contains("provenance")) m.provenance_json = meta["provenance"].dump();

  m.graph_fingerprint = r.u64();
  m.norm_mean = r.f64();
  m.norm_std = r.f64();

  // Rebuild the skeleton, then overwrite every tensor from the file.
  const std::size_t d = m.hyper.model_dim;
  m.ste.model_dim = d;
  m.ste.eigen_dim = m.hyper.eigen_dim;
  m.ste.merge_mode = m.hyper.merge_mode;

  const std::uint32_t tensor_count = r.u32();
  std::vector<std::pair<std::string, Tensor>> loaded;
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    std::string name;
    Tensor t = read_tensor(r, name, true);
    loaded.emplace_back(std::move(name), std::move(t));
  }

  auto take = [&loaded](const std::string& name) -> Tensor {
    for (auto& [n, t] : loaded)
      if (n == name) return t;
    throw DataError("load_checkpoint: missing tensor '" + name + "'");
  };

  m.input_weight = take("input.weight");
  m.input_bias = take("input.bias");
  m.output_weight = take("output.weight");
  m.output_bias = take("output.bias");
  m.ste.se_weight = take("ste.se_weight");
  m.ste.se_bias = take("ste.se_bias");
  m.ste.ste_weight = take("ste.ste_weight");
  m.ste.ste_bias = take("ste.ste_bias");
  for (std::size_t l = 0; l < m.hyper.encoder_layers; ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    EncoderLayerParams layer;
    for (std::size_t h = 0; h < m.hyper.heads; ++h) {
      layer.mta.wq.push_back(take(prefix + ".mta.wq." + std::to_string(h)));
      layer.mta.wk.push_back(take(prefix + ".mta.wk." + std::to_string(h)));
      layer.mta.wv.push_back(take(prefix + ".mta.wv." + std::to_string(h)));
      layer.msa.wq.push_back(take(prefix + ".msa.wq." + std::to_string(h)));
      layer.msa.wk.push_back(take(prefix + ".msa.wk." + std::to_string(h)));
      layer.msa.wv.push_back(take(prefix + ".msa.wv." + std::to_string(h)));
    }
    layer.mta.wo = take(prefix + ".mta.wo");
    layer.mta.ln_gamma = take(prefix + ".mta.ln_gamma");
    layer.mta.ln_beta = take(prefix + ".mta.ln_beta");
    layer.msa.wo = take(prefix + ".msa.wo");
    layer.msa.ln_gamma = take(prefix + ".msa.ln_gamma");
    layer.msa.ln_beta = take(prefix + ".msa.ln_beta");
    layer.ffn.w1 = take(prefix + ".ffn.w1");
    layer.ffn.b1 = take(prefix + ".ffn.b1");
    layer.ffn.w2 = take(prefix + ".ffn.w2");
    layer.ffn.b2 = take(prefix + ".ffn.b2");
    layer.ffn.ln_gamma = take(prefix + ".ffn.ln_gamma");
    layer.ffn.ln_beta = take(prefix + ".ffn.ln_beta");
    m.encoder.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < m.hyper.decoder_layers; ++l) {
    const std::string prefix = "decoder." + std::to_string(l);
    DecoderLayerParams layer;
    for (std::size_t h = 0; h < m.hyper.heads; ++h) {
      layer.mta.wq.push_back(take(prefix + ".mta.wq." + std::to_string(h)));
      layer.mta.wk.push_back(take(prefix + ".mta.wk." + std::to_string(h)));
      layer.mta.wv.push_back(take(prefix + ".mta.wv." + std::to_string(h)));
      layer.msa.wq.push_back(take(prefix + ".msa.wq." + std::to_string(h)));
      layer.msa.wk.push_back(take(prefix + ".msa.wk." + std::to_string(h)));
      layer.msa.wv.push_back(take(prefix + ".msa.wv." + std::to_string(h)));
      layer.msia.wq.push_back(take(prefix + ".msia.wq." + std::to_string(h)));
      layer.msia.wk.push_back(take(prefix + ".msia.wk." + std::to_string(h)));
      layer.msia.wv.push_back(take(prefix + ".msia.wv." + std::to_string(h)));
    }
    layer.mta.wo = take(prefix + ".mta.wo");
    layer.mta.ln_gamma = take(prefix + ".mta.ln_gamma");
    layer.mta.ln_beta = take(prefix + ".mta.ln_beta");
    layer.msa.wo = take(prefix + ".msa.wo");
    layer.msa.ln_gamma = take(prefix + ".msa.ln_gamma");
    layer.msa.ln_beta = take(prefix + ".msa.ln_beta");
    layer.msia.wo = take(prefix + ".msia.wo");
    layer.msia.ln_gamma = take(prefix + ".msia.ln_gamma");
    layer.msia.ln_beta = take(prefix + ".msia.ln_beta");
    layer.ffn.w1 = take(prefix + ".ffn.w1");
    layer.ffn.b1 = take(prefix + ".ffn.b1");
    layer.ffn.w2 = take(prefix + ".ffn.w2");
    layer.ffn.b2 = take(prefix + ".ffn.b2");
    layer.ffn.ln_gamma = take(prefix + ".ffn.ln_gamma");
    layer.ffn.ln_beta = take(prefix + ".ffn.ln_beta");
    m.decoder.push_back(std::move(layer));
  }
  m.final_weight = take("final.weight");
  m.final_bias = take("final.bias");

  // Buffers are stored last and are not trained.
  Tensor se_buf = take("buffer.se_raw");
  m.se_raw = Tensor::from_data(se_buf.shape(), se_buf.values());
  Tensor mask_buf = take("buffer.spatial_mask");
  m.spatial_mask = Tensor::from_data(mask_buf.shape(), mask_buf.values());
  return m;
}

}  // namespace kriformer
