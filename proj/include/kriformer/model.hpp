#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kriformer/attention.hpp"
#include "kriformer/embedding.hpp"
#include "kriformer/graph.hpp"
#include "kriformer/rng.hpp"
#include "kriformer/tensor.hpp"

namespace kriformer {

struct ModelHyper {
  std::size_t channels = 1;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  double dropout = 0.2;
  std::size_t eigen_dim = 0;  // 0 picks min(16, N-1)
  MergeMode merge_mode = MergeMode::add;
};

struct AblationFlags {
  bool no_te = false;
  bool no_se = false;
  bool no_ste = false;
  bool no_mta = false;
  bool no_msa = false;
  bool no_msia = false;

  bool operator==(const AblationFlags&) const = default;
};

// Variant names accepted by apply_ablation.
AblationFlags ablation_from_name(const std::string& variant);
std::string ablation_name(const AblationFlags& flags);
const std::vector<std::string>& ablation_variant_names();  // without "none"

struct EncoderLayerParams {
  AttentionBlockParams mta;
  AttentionBlockParams msa;
  FfnParams ffn;
};

struct DecoderLayerParams {
  AttentionBlockParams mta;
  AttentionBlockParams msa;
  AttentionBlockParams msia;
  FfnParams ffn;
};

// Graph-derived inputs to the model: eigenmap features, the additive spatial
// attention mask, and a fingerprint tying both to the distance data.
struct SpatialContext {
  Tensor se_raw;        // N x k
  Tensor spatial_mask;  // N x N
  std::uint64_t fingerprint = 0;
};

SpatialContext make_spatial_context(const SensorGraph& graph,
                                    std::size_t eigen_dim = 0,
                                    bool literal_eq6 = false);

struct KriformerModel {
  ModelHyper hyper;
  AblationFlags ablation;

  Tensor input_weight, input_bias;    // C x D, D (encoder embedding)
  Tensor output_weight, output_bias;  // C x D, D (decoder embedding)
  STEConfig ste;
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor final_weight, final_bias;    // D x C, C

  Tensor se_raw;        // fixed N x k buffer
  Tensor spatial_mask;  // fixed N x N buffer
  std::uint64_t graph_fingerprint = 0;

  // Standardization statistics captured by training; identity until then.
  double norm_mean = 0.0;
  double norm_std = 1.0;

  // Free-form provenance (dataset description) carried through checkpoints.
  std::string provenance_json;

  std::size_t nodes() const { return se_raw.defined() ? se_raw.shape()[0] : 0; }

  // Learnable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<Tensor> parameters();
};

KriformerModel init_model(const ModelHyper& hyper, const SpatialContext& ctx,
                          std::uint64_t seed);

// Closed-form learnable-parameter count for the given configuration.
std::size_t parameter_count(const ModelHyper& hyper, std::size_t eigen_dim);

// Full encoder-decoder pass over a masked T x N x C window. Masked and
// unobserved node slices of x must already be zero. Dropout runs only when
// training is true, drawing from rng.
Tensor forward(const KriformerModel& model, const Tensor& x, bool training,
               Rng* rng = nullptr);

// Deep copy with the named block disabled (attention blocks become identity
// pass-throughs; embedding contributions are zeroed). "none" copies as-is.
KriformerModel apply_ablation(const KriformerModel& model,
                              const std::string& variant);

KriformerModel clone_model(const KriformerModel& model);

// Versioned binary container; round trips reproduce forward outputs bitwise.
void save_checkpoint(const KriformerModel& model, const std::string& path);
KriformerModel load_checkpoint(const std::string& path);

}  // namespace kriformer
