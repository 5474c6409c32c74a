// Volumes, the RVOL v1 file format, and image preprocessing.
#pragma once

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace segsurv {

using Index = Eigen::Index;
using Extent3 = std::array<Index, 3>;
using Spacing3 = std::array<double, 3>;

enum class Modality { CT, PET, MASK };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Dense (H, W, D) scalar grid, C-order with D fastest.
struct Volume {
  Extent3 shape{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  Modality modality = Modality::CT;
  Eigen::ArrayXf data;

  Volume() = default;
  Volume(Extent3 s, Spacing3 sp, Modality m, float fill = 0.0f);

  Index voxels() const { return shape[0] * shape[1] * shape[2]; }
  Index offset(Index i, Index j, Index k) const { return (i * shape[1] + j) * shape[2] + k; }
  float& at(Index i, Index j, Index k) { return data[offset(i, j, k)]; }
  float at(Index i, Index j, Index k) const { return data[offset(i, j, k)]; }

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

bool operator==(const Volume& a, const Volume& b);

enum class VolumeErrc { Io, MalformedHeader, ShapeMismatch, UnsupportedDtype };

class VolumeError : public std::runtime_error {
 public:
  VolumeError(VolumeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  VolumeErrc code() const { return code_; }

 private:
  VolumeErrc code_;
};

// RVOL v1: "RVOL0001", u32 LE header length, UTF-8 JSON header
// {"shape":[H,W,D],"spacing":[sx,sy,sz],"modality":"CT|PET|MASK","dtype":"f32"},
// then H·W·D little-endian f32 in C-order.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

/// Resamples to isotropic `target` mm spacing: trilinear for CT/PET, nearest
/// for MASK. Output extent per axis is round(extent · spacing / target).
Volume resample_isotropic(const Volume& v, double target);

/// Clips HU to [-1024, 1024] and maps linearly onto [-1, 1].
Volume normalize_ct(const Volume& v);

/// Per-volume z-score with the standard deviation floored at eps.
Volume normalize_pet(const Volume& v, double eps = 1e-8);

/// Centered window of `target` extent; axes smaller than the target are
/// zero-padded symmetrically first (extra voxel goes after the data).
Volume crop_center(const Volume& v, const Extent3& target);

}  // namespace segsurv
