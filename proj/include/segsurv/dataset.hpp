// Subjects, preprocessing pipeline, and on-disk dataset layout.
//
// A dataset directory holds
//   ehr.csv          one row per subject (see read_ehr_csv)
//   schema.json      EhrSchema
//   volumes/<id>_ct.rvol, <id>_pet.rvol, <id>_mask.rvol
#pragma once

#include "segsurv/ehr.hpp"
#include "segsurv/volume.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace segsurv {

struct Subject {
  std::string id;
  Volume ct;
  Volume pet;
  Volume mask;
  EhrRecord ehr;
  SurvivalLabel label;
};

struct PreprocessConfig {
  double spacing = 1.0;       // mm, isotropic
  Extent3 crop{32, 32, 16};   // voxels after resampling
};

/// Resample to isotropic spacing, normalize CT and PET, center-crop all three.
Subject preprocess_subject(const Subject& s, const PreprocessConfig& cfg);

/// Throws unless ct/pet/mask agree in shape and spacing.
void check_subject_geometry(const Subject& s);

void write_dataset(const std::filesystem::path& dir, const std::vector<Subject>& subjects, const EhrSchema& schema);
std::vector<Subject> read_dataset(const std::filesystem::path& dir, EhrSchema* schema_out = nullptr);

/// Foreground volume of a mask in mm³.
double mask_volume_mm3(const Volume& mask);

}  // namespace segsurv
