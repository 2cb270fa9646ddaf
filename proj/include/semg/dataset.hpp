#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace semg {

/// One subject's multi-channel recording with per-sample labels.
///
/// Samples are stored channel-major ([channel][t]) in double precision; the
/// on-disk format narrows to f32, so everything loaded from disk (and
/// everything the synthetic generator emits) is exactly f32-representable.
/// Class label 0 is rest; repetition label 0 marks a rest gap.
struct Recording {
  int subject_id = 0;
  int fs_hz = 0;
  std::size_t channels = 0;
  std::vector<double> samples;
  std::vector<std::uint16_t> class_labels;
  std::vector<std::uint8_t> repetition_labels;
  /// Index of each sample in the recording it was cut from. Empty means
  /// identity (an unsplit recording).
  std::vector<std::size_t> origin;

  std::size_t length() const noexcept { return class_labels.size(); }
  std::span<const double> channel(std::size_t c) const {
    return {samples.data() + c * length(), length()};
  }
  std::span<double> channel(std::size_t c) { return {samples.data() + c * length(), length()}; }
  std::size_t origin_of(std::size_t t) const { return origin.empty() ? t : origin[t]; }

  /// Throws HeaderShapeMismatch when the stream lengths disagree.
  void check_shape() const;
};

struct SubjectEntry {
  int id = 0;
  std::string file;
};

struct DatasetManifest {
  std::string name;
  int fs_hz = 0;
  std::size_t channels = 0;
  /// Number of distinct class labels including rest (labels are 0..class_count-1).
  int class_count = 0;
  int repetition_count = 0;
  /// When false (default) rest windows are dropped before classification.
  bool rest_is_class = false;
  std::vector<SubjectEntry> subjects;

  int movement_class_count() const noexcept { return class_count - 1; }
  /// Number of classifier outputs implied by rest_is_class.
  int output_classes() const noexcept { return rest_is_class ? class_count : class_count - 1; }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Recording> recordings;
};

struct SplitSpec {
  std::set<int> train_repetitions;
  std::set<int> test_repetitions;
  std::optional<int> held_out_subject;

  /// Throws EmptySplit when either set is empty, InvalidConfig when they overlap
  /// or mention ids outside 1..repetition_count.
  void validate(int repetition_count) const;
};

// ---- portable subject file ------------------------------------------------

inline constexpr std::uint8_t kSubjectFormatVersion = 0x01;

std::vector<std::uint8_t> encode_subject_file(const Recording& rec);
Recording decode_subject_file(std::span<const std::uint8_t> bytes, int subject_id);

void write_subject_file(const std::filesystem::path& path, const Recording& rec);
Recording read_subject_file(const std::filesystem::path& path, int subject_id);

DatasetManifest parse_manifest(const std::string& json_text);
std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Loads every subject listed in the manifest and validates it against the
/// manifest header (channels, fs, label ranges).
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Writes the manifest as `manifest.json` plus one subject file per recording.
/// Subject file names are taken from `manifest.subjects` when present,
/// otherwise `subject_<id>.semg`. Returns the path of the manifest.
std::filesystem::path write_dataset(const std::filesystem::path& out_dir,
                                    DatasetManifest manifest,
                                    const std::vector<Recording>& recordings);

// ---- splits ----------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Sample indices for each side of a repetition split. Rest samples follow the
/// movement segment they come after; leading rest goes to train. Samples whose
/// owning repetition is in neither set are dropped.
SplitIndices split_indices(const Recording& rec, const SplitSpec& spec);

Recording select_samples(const Recording& rec, std::span<const std::size_t> indices);

std::pair<Recording, Recording> split_by_repetition(const Recording& rec, const SplitSpec& spec);

std::pair<std::vector<Recording>, Recording> split_leave_one_subject_out(
    const std::vector<Recording>& recs, int held_out);

// ---- synthetic data --------------------------------------------------------

struct SynthConfig {
  int subjects = 4;
  int classes = 6;
  int repetitions = 6;
  std::size_t channels = 12;
  int fs_hz = 2000;
  std::uint64_t seed = 1;
  double movement_s = 5.0;
  double rest_s = 3.0;
  /// Log-normal spread of each subject's per-class channel pattern and the
  /// scale of per-subject frequency shifts. 0 makes subjects differ only by
  /// channel gain and offset.
  double subject_variability = 0.35;

  void validate() const;
};

/// NinaPro-style protocol: for each movement class, `repetitions` executions
/// of `movement_s` seconds each followed by `rest_s` seconds of rest.
/// Subject ids are 1..subjects.
std::vector<Recording> synthesize_dataset(const SynthConfig& cfg);

DatasetManifest synthetic_manifest(const SynthConfig& cfg);

}  // namespace semg
