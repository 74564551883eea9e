#include "kriformer/embedding.hpp"

#include <cmath>

#include "kriformer/errors.hpp"

namespace kriformer {

MergeMode merge_mode_from_string(const std::string& name) {
  if (name == "add") return MergeMode::add;
  if (name == "concat") return MergeMode::concat;
  if (name == "multiply") return MergeMode::multiply;
  throw ParamError("unknown merge mode '" + name + "' (add|concat|multiply)");
}

std::string merge_mode_name(MergeMode mode) {
  switch (mode) {
    case MergeMode::add: return "add";
    case MergeMode::concat: return "concat";
    case MergeMode::multiply: return "multiply";
  }
  throw ParamError("invalid merge mode value");
}

Tensor temporal_embedding(std::size_t timesteps, std::size_t model_dim) {
  if (timesteps < 1) throw ParamError("temporal_embedding: T must be >= 1");
  if (model_dim == 0 || model_dim % 2 != 0)
    throw ParamError("temporal_embedding: D must be even, got " +
                     std::to_string(model_dim));
  std::vector<double> te(timesteps * model_dim);
  for (std::size_t t = 0; t < timesteps; ++t) {
    for (std::size_t pair = 0; pair < model_dim / 2; ++pair) {
      const double exponent =
          static_cast<double>(2 * pair) / static_cast<double>(model_dim);
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, exponent);
      te[t * model_dim + 2 * pair] = std::sin(angle);
      te[t * model_dim + 2 * pair + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({timesteps, model_dim}, std::move(te));
}

Tensor project_spatial(const Tensor& se_raw, const STEConfig& config) {
  if (se_raw.rank() != 2 || se_raw.shape()[1] != config.eigen_dim)
    throw ShapeError("project_spatial: expected (N," +
                     std::to_string(config.eigen_dim) + "), got " +
                     shape_str(se_raw.shape()));
  return add(matmul(se_raw, config.se_weight), config.se_bias);
}

Tensor merge_ste(const Tensor& te, const Tensor& se, const STEConfig& config) {
  const std::size_t d = config.model_dim;
  if (te.rank() != 2 || te.shape()[1] != d)
    throw ShapeError("merge_ste: TE must be (T," + std::to_string(d) +
                     "), got " + shape_str(te.shape()));
  if (se.rank() != 2 || se.shape()[1] != d)
    throw ShapeError("merge_ste: SE must be (N," + std::to_string(d) +
                     "), got " + shape_str(se.shape()));
  const std::size_t t_len = te.shape()[0];
  const std::size_t n = se.shape()[0];

  // (T,1,D) against (N,D) broadcasts to (T,N,D).
  Tensor te_mid = reshape(te, {t_len, 1, d});
  Tensor coupled;
  switch (config.merge_mode) {
    case MergeMode::add:
      coupled = add(te_mid, se);
      break;
    case MergeMode::multiply:
      coupled = mul(te_mid, se);
      break;
    case MergeMode::concat:
      coupled = concat_lastdim({broadcast_to(te_mid, {t_len, n, d}),
                                broadcast_to(se, {t_len, n, d})});
      break;
  }
  return add(matmul(coupled, config.ste_weight), config.ste_bias);
}

}  // namespace kriformer
