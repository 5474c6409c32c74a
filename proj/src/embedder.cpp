#include "segsurv/embedder.hpp"

#include <stdexcept>

namespace segsurv {

void EmbedConfig::validate() const {
  if (patch < 1 || hidden < 1 || channels != 2 || ehr_features < 1)
    throw std::invalid_argument("embed config: patch, hidden, ehr_features must be positive and channels == 2");
  for (Index d : input)
    if (d < 1 || d % patch != 0)
      throw std::invalid_argument("embed config: input extent " + std::to_string(d) + " not divisible by patch " +
                                  std::to_string(patch));
}

template <typename S>
RowMatrix<S> patchify(const Volume& ct, const Volume& pet, Index patch) {
  if (ct.shape != pet.shape) throw std::invalid_argument("patchify: CT and PET shapes differ");
  for (Index d : ct.shape)
    if (patch < 1 || d % patch != 0)
      throw std::invalid_argument("patchify: extent " + std::to_string(d) + " not divisible by patch " +
                                  std::to_string(patch));
  const Extent3 g{ct.shape[0] / patch, ct.shape[1] / patch, ct.shape[2] / patch};
  const Index block = patch * patch * patch;
  RowMatrix<S> rows(g[0] * g[1] * g[2], 2 * block);
  Index r = 0;
  for (Index gi = 0; gi < g[0]; ++gi)
    for (Index gj = 0; gj < g[1]; ++gj)
      for (Index gk = 0; gk < g[2]; ++gk, ++r) {
        Index c = 0;
        for (Index i = 0; i < patch; ++i)
          for (Index j = 0; j < patch; ++j)
            for (Index k = 0; k < patch; ++k, ++c) {
              const Index off = ct.offset(gi * patch + i, gj * patch + j, gk * patch + k);
              rows(r, c) = static_cast<S>(ct.data[off]);
              rows(r, block + c) = static_cast<S>(pet.data[off]);
            }
      }
  return rows;
}

std::pair<Volume, Volume> unpatchify(const RowMatrix<float>& rows, const Extent3& shape, Index patch) {
  Volume ct(shape, {1, 1, 1}, Modality::CT), pet(shape, {1, 1, 1}, Modality::PET);
  const Extent3 g{shape[0] / patch, shape[1] / patch, shape[2] / patch};
  const Index block = patch * patch * patch;
  if (rows.rows() != g[0] * g[1] * g[2] || rows.cols() != 2 * block)
    throw std::invalid_argument("unpatchify: row matrix does not match shape");
  Index r = 0;
  for (Index gi = 0; gi < g[0]; ++gi)
    for (Index gj = 0; gj < g[1]; ++gj)
      for (Index gk = 0; gk < g[2]; ++gk, ++r) {
        Index c = 0;
        for (Index i = 0; i < patch; ++i)
          for (Index j = 0; j < patch; ++j)
            for (Index k = 0; k < patch; ++k, ++c) {
              const Index off = ct.offset(gi * patch + i, gj * patch + j, gk * patch + k);
              ct.data[off] = rows(r, c);
              pet.data[off] = rows(r, block + c);
            }
      }
  return {std::move(ct), std::move(pet)};
}

template <typename S>
Embedder<S>::Embedder(ParameterSet<S>& params, const EmbedConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  patch_w_ = &params.add("embed.patch.weight", {cfg_.patch_length(), cfg_.hidden});
  patch_b_ = &params.add("embed.patch.bias", {cfg_.hidden});
  ehr_w_ = &params.add("embed.ehr.weight", {cfg_.ehr_features, cfg_.hidden});
  ehr_b_ = &params.add("embed.ehr.bias", {cfg_.hidden});
  position_ = &params.add("embed.position", {cfg_.tokens() + 1, cfg_.hidden});
}

template <typename S>
Var<S> Embedder<S>::forward(Var<S> patches, Var<S> ehr) const {
  Tape<S>& tape = *patches.tape;
  const Shape& ps = patches.shape();
  if (ps.size() != 3 || ps[1] != cfg_.tokens() || ps[2] != cfg_.patch_length())
    throw_shape_error("embed", ps, {cfg_.tokens(), cfg_.patch_length()});
  const Shape& es = ehr.shape();
  if (es.size() != 2 || es[0] != ps[0] || es[1] != cfg_.ehr_features)
    throw ShapeError("embed: EHR feature length mismatch: got " + shape_str(es) + ", expected [" +
                     std::to_string(ps[0]) + "," + std::to_string(cfg_.ehr_features) + "]");
  const Index n = ps[0];
  Var<S> image = linear(patches, tape.param(*patch_w_), tape.param(*patch_b_));
  Var<S> record = reshape(linear(ehr, tape.param(*ehr_w_), tape.param(*ehr_b_)), {n, 1, cfg_.hidden});
  return embedding_add(concat<S>({image, record}, 1), tape.param(*position_));
}

template RowMatrix<float> patchify<float>(const Volume&, const Volume&, Index);
template RowMatrix<double> patchify<double>(const Volume&, const Volume&, Index);
template class Embedder<float>;
template class Embedder<double>;

}  // namespace segsurv
