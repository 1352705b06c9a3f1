#include "susa/numerics/tensor.hpp"

namespace susa {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void require_same_shape(const Shape& a, const Shape& b, std::string_view what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

std::string_view to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::weight: return "weight";
    case ParamKind::bias: return "bias";
    case ParamKind::pelu: return "pelu";
  }
  return "weight";
}

ParamKind param_kind_from_string(std::string_view s) {
  if (s == "weight") return ParamKind::weight;
  if (s == "bias") return ParamKind::bias;
  if (s == "pelu") return ParamKind::pelu;
  throw std::invalid_argument("unknown parameter kind '" + std::string(s) + "'");
}

}  // namespace susa
