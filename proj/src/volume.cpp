#include "segsurv/volume.hpp"

#include "binary_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace segsurv {

namespace {

constexpr char kMagic[8] = {'R', 'V', 'O', 'L', '0', '0', '0', '1'};

// Header length guard: a corrupt length field should not trigger a giant read.
constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;

}  // namespace

std::string to_string(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::PET: return "PET";
    case Modality::MASK: return "MASK";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "CT") return Modality::CT;
  if (s == "PET") return Modality::PET;
  if (s == "MASK") return Modality::MASK;
  throw std::invalid_argument("unknown modality: " + s);
}

Volume::Volume(Extent3 s, Spacing3 sp, Modality m, float fill) : shape(s), spacing(sp), modality(m) {
  for (Index d : s)
    if (d < 1) throw std::invalid_argument("volume extents must be positive");
  data = Eigen::ArrayXf::Constant(voxels(), fill);
}

void Volume::validate() const {
  for (Index d : shape)
    if (d < 1) throw std::invalid_argument("volume extents must be positive");
  for (double s : spacing)
    if (!(s > 0)) throw std::invalid_argument("volume spacing must be positive");
  if (data.size() != voxels()) throw std::invalid_argument("volume data length does not match shape");
  if (modality == Modality::MASK && !((data == 0.0f) || (data == 1.0f)).all())
    throw std::invalid_argument("mask volume contains values other than 0 and 1");
}

bool operator==(const Volume& a, const Volume& b) {
  return a.shape == b.shape && a.spacing == b.spacing && a.modality == b.modality && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), sizeof(float) * static_cast<size_t>(a.data.size())) == 0;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  nlohmann::json header = {{"shape", v.shape},
                           {"spacing", v.spacing},
                           {"modality", to_string(v.modality)},
                           {"dtype", "f32"}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeError(VolumeErrc::Io, "cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_le<float>(os, std::span<const float>(v.data.data(), static_cast<size_t>(v.data.size())));
  if (!os) throw VolumeError(VolumeErrc::Io, "failed writing " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolumeError(VolumeErrc::Io, "cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (is.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": bad magic");
  std::uint32_t len = 0;
  if (!detail::read_le<std::uint32_t>(is, std::span<std::uint32_t>(&len, 1)) || len == 0 || len > kMaxHeaderBytes)
    throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": bad header length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (static_cast<std::uint32_t>(is.gcount()) != len)
    throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": truncated header");

  Volume v;
  std::string dtype;
  try {
    const auto header = nlohmann::json::parse(text);
    v.shape = header.at("shape").get<Extent3>();
    v.spacing = header.at("spacing").get<Spacing3>();
    v.modality = modality_from_string(header.at("modality").get<std::string>());
    dtype = header.at("dtype").get<std::string>();
  } catch (const std::exception& e) {
    throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": " + e.what());
  }
  if (dtype != "f32") throw VolumeError(VolumeErrc::UnsupportedDtype, path.string() + ": unsupported dtype " + dtype);
  for (Index d : v.shape)
    if (d < 1) throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": nonpositive extent");
  for (double s : v.spacing)
    if (!(s > 0)) throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": nonpositive spacing");

  const auto payload_start = is.tellg();
  is.seekg(0, std::ios::end);
  const auto payload_bytes = static_cast<Index>(is.tellg() - payload_start);
  is.seekg(payload_start);
  if (payload_bytes != v.voxels() * static_cast<Index>(sizeof(float)))
    throw VolumeError(VolumeErrc::ShapeMismatch, path.string() + ": header shape needs " + std::to_string(v.voxels()) +
                                                     " scalars, payload holds " + std::to_string(payload_bytes) +
                                                     " bytes");
  v.data.resize(v.voxels());
  if (!detail::read_le<float>(is, std::span<float>(v.data.data(), static_cast<size_t>(v.voxels()))))
    throw VolumeError(VolumeErrc::ShapeMismatch, path.string() + ": short payload");
  if (v.modality == Modality::MASK && !((v.data == 0.0f) || (v.data == 1.0f)).all())
    throw VolumeError(VolumeErrc::MalformedHeader, path.string() + ": mask payload is not binary");
  return v;
}

Volume resample_isotropic(const Volume& v, double target) {
  v.validate();
  if (!(target > 0)) throw std::invalid_argument("resample_isotropic: target spacing must be positive");
  Extent3 out_shape;
  for (int a = 0; a < 3; ++a) {
    out_shape[a] = static_cast<Index>(std::lround(static_cast<double>(v.shape[a]) * v.spacing[a] / target));
    if (out_shape[a] < 1) throw std::invalid_argument("resample_isotropic: degenerate output shape");
  }
  Volume out(out_shape, {target, target, target}, v.modality);
  const bool nearest = v.modality == Modality::MASK;

  // Output voxel i sits at physical i·target, source voxel j at j·spacing.
  struct Tap {
    Index lo, hi;
    double frac;
  };
  auto taps = [&](int axis) {
    std::vector<Tap> t(static_cast<size_t>(out_shape[axis]));
    for (Index i = 0; i < out_shape[axis]; ++i) {
      double pos = static_cast<double>(i) * target / v.spacing[axis];
      pos = std::clamp(pos, 0.0, static_cast<double>(v.shape[axis] - 1));
      if (nearest) {
        const Index j = static_cast<Index>(std::lround(pos));
        t[static_cast<size_t>(i)] = {j, j, 0.0};
      } else {
        const Index lo = static_cast<Index>(std::floor(pos));
        const Index hi = std::min(lo + 1, v.shape[axis] - 1);
        t[static_cast<size_t>(i)] = {lo, hi, pos - static_cast<double>(lo)};
      }
    }
    return t;
  };
  const auto tx = taps(0), ty = taps(1), tz = taps(2);
  for (Index i = 0; i < out_shape[0]; ++i)
    for (Index j = 0; j < out_shape[1]; ++j)
      for (Index k = 0; k < out_shape[2]; ++k) {
        const Tap& a = tx[static_cast<size_t>(i)];
        const Tap& b = ty[static_cast<size_t>(j)];
        const Tap& c = tz[static_cast<size_t>(k)];
        if (nearest) {
          out.at(i, j, k) = v.at(a.lo, b.lo, c.lo);
          continue;
        }
        double acc = 0;
        for (int dx = 0; dx < 2; ++dx) {
          const double wx = dx ? a.frac : 1 - a.frac;
          if (wx == 0) continue;
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? b.frac : 1 - b.frac;
            if (wy == 0) continue;
            for (int dz = 0; dz < 2; ++dz) {
              const double wz = dz ? c.frac : 1 - c.frac;
              if (wz == 0) continue;
              acc += wx * wy * wz * v.at(dx ? a.hi : a.lo, dy ? b.hi : b.lo, dz ? c.hi : c.lo);
            }
          }
        }
        out.at(i, j, k) = static_cast<float>(acc);
      }
  return out;
}

Volume normalize_ct(const Volume& v) {
  if (v.modality != Modality::CT) throw std::invalid_argument("normalize_ct: volume is not CT");
  Volume out = v;
  out.data = v.data.max(-1024.0f).min(1024.0f) / 1024.0f;
  return out;
}

Volume normalize_pet(const Volume& v, double eps) {
  if (v.modality != Modality::PET) throw std::invalid_argument("normalize_pet: volume is not PET");
  const Eigen::ArrayXd x = v.data.cast<double>();
  const double mu = x.mean();
  const double sd = std::sqrt((x - mu).square().mean());
  Volume out = v;
  out.data = ((x - mu) / std::max(sd, eps)).cast<float>();
  return out;
}

Volume crop_center(const Volume& v, const Extent3& target) {
  for (Index d : target)
    if (d < 1) throw std::invalid_argument("crop_center: target extents must be positive");
  Volume out(target, v.spacing, v.modality, 0.0f);
  // Source index = output index + shift; shift < 0 means padding before the data.
  Extent3 shift;
  for (int a = 0; a < 3; ++a) {
    const Index diff = v.shape[a] - target[a];
    shift[a] = diff >= 0 ? diff / 2 : -((-diff) / 2);
  }
  for (Index i = 0; i < target[0]; ++i) {
    const Index si = i + shift[0];
    if (si < 0 || si >= v.shape[0]) continue;
    for (Index j = 0; j < target[1]; ++j) {
      const Index sj = j + shift[1];
      if (sj < 0 || sj >= v.shape[1]) continue;
      for (Index k = 0; k < target[2]; ++k) {
        const Index sk = k + shift[2];
        if (sk >= 0 && sk < v.shape[2]) out.at(i, j, k) = v.at(si, sj, sk);
      }
    }
  }
  return out;
}

}  // namespace segsurv
