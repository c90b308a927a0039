#include "coal/config.hpp"

#include "coal/error.hpp"

namespace coal {

std::string_view to_string(ModelFamily f) { return f == ModelFamily::da ? "da" : "mtl"; }

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::diag: return "diag";
    case Variant::full_x: return "full+x";
    case Variant::diag_x: return "diag+x";
    case Variant::data: return "data";
  }
  return "full";
}

ModelFamily parse_family(std::string_view s) {
  if (s == "da") return ModelFamily::da;
  if (s == "mtl") return ModelFamily::mtl;
  throw Error(ErrorKind::invalid_argument, "unknown model family '" + std::string(s) + "'");
}

Variant parse_variant(std::string_view s) {
  if (s == "full") return Variant::full;
  if (s == "diag") return Variant::diag;
  if (s == "full+x" || s == "full_x") return Variant::full_x;
  if (s == "diag+x" || s == "diag_x") return Variant::diag_x;
  if (s == "data") return Variant::data;
  throw Error(ErrorKind::invalid_argument, "unknown variant '" + std::string(s) + "'");
}

void validate(const ModelConfig& cfg) {
  require(cfg.sigma2 > 0.0, ErrorKind::invalid_argument, "sigma2 must be positive");
  require(cfg.rho2 > 0.0, ErrorKind::invalid_argument, "rho2 must be positive");
  require(cfg.em_iters >= 0, ErrorKind::invalid_argument, "em_iters must be non-negative");
  require(cfg.holdout >= 0.0 && cfg.holdout < 1.0, ErrorKind::invalid_argument, "holdout must lie in [0,1)");
  if (cfg.fixed_lambda) require(cfg.fixed_lambda->is_psd(), ErrorKind::not_psd, "fixed lambda is not PSD");
  if (cfg.family == ModelFamily::mtl)
    require(!models_inputs(cfg.variant), ErrorKind::invalid_argument,
            "the multitask model supports only the full and diag variants");
}

}  // namespace coal
