#include "segsurv/tensor.hpp"

#include <sstream>

namespace segsurv {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void throw_shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace segsurv
