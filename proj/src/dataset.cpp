#include "segsurv/dataset.hpp"

#include <stdexcept>

namespace segsurv {

namespace fs = std::filesystem;

void check_subject_geometry(const Subject& s) {
  if (s.ct.shape != s.pet.shape || s.ct.shape != s.mask.shape)
    throw std::invalid_argument("subject " + s.id + ": CT/PET/mask shapes differ");
  if (s.ct.spacing != s.pet.spacing || s.ct.spacing != s.mask.spacing)
    throw std::invalid_argument("subject " + s.id + ": CT/PET/mask spacings differ");
}

Subject preprocess_subject(const Subject& s, const PreprocessConfig& cfg) {
  Subject out;
  out.id = s.id;
  out.ehr = s.ehr;
  out.label = s.label;
  out.ct = crop_center(normalize_ct(resample_isotropic(s.ct, cfg.spacing)), cfg.crop);
  out.pet = crop_center(normalize_pet(resample_isotropic(s.pet, cfg.spacing)), cfg.crop);
  out.mask = crop_center(resample_isotropic(s.mask, cfg.spacing), cfg.crop);
  check_subject_geometry(out);
  return out;
}

void write_dataset(const fs::path& dir, const std::vector<Subject>& subjects, const EhrSchema& schema) {
  fs::create_directories(dir / "volumes");
  std::vector<EhrRow> rows;
  for (const auto& s : subjects) {
    write_volume(s.ct, dir / "volumes" / (s.id + "_ct.rvol"));
    write_volume(s.pet, dir / "volumes" / (s.id + "_pet.rvol"));
    write_volume(s.mask, dir / "volumes" / (s.id + "_mask.rvol"));
    rows.push_back({s.id, s.ehr, s.label});
  }
  write_ehr_csv(dir / "ehr.csv", rows, schema);
  schema.save(dir / "schema.json");
}

std::vector<Subject> read_dataset(const fs::path& dir, EhrSchema* schema_out) {
  const EhrSchema schema = EhrSchema::load(dir / "schema.json");
  std::vector<Subject> subjects;
  for (auto& row : read_ehr_csv(dir / "ehr.csv", schema)) {
    Subject s;
    s.id = row.id;
    s.ehr = std::move(row.record);
    s.label = row.label;
    s.ct = read_volume(dir / "volumes" / (s.id + "_ct.rvol"));
    s.pet = read_volume(dir / "volumes" / (s.id + "_pet.rvol"));
    s.mask = read_volume(dir / "volumes" / (s.id + "_mask.rvol"));
    subjects.push_back(std::move(s));
  }
  if (schema_out) *schema_out = schema;
  return subjects;
}

double mask_volume_mm3(const Volume& mask) {
  return static_cast<double>(mask.data.sum()) * mask.spacing[0] * mask.spacing[1] * mask.spacing[2];
}

}  // namespace segsurv
