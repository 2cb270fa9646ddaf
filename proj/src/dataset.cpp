#include "semg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <set>

#include <json.hpp>

#include "semg/error.hpp"
#include "semg/io.hpp"
#include "semg/rng.hpp"

namespace semg {

namespace {

using json = nlohmann::json;

constexpr std::size_t kHeaderBytes = 4 + 1 + 4 + 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace

void Recording::check_shape() const {
  const std::size_t t = class_labels.size();
  if (repetition_labels.size() != t || samples.size() != channels * t ||
      (!origin.empty() && origin.size() != t)) {
    throw Error(ErrorCode::HeaderShapeMismatch,
                "recording streams disagree in length (subject " + std::to_string(subject_id) + ")");
  }
}

void SplitSpec::validate(int repetition_count) const {
  if (train_repetitions.empty() || test_repetitions.empty()) {
    throw Error(ErrorCode::EmptySplit, "train and test repetition sets must both be non-empty");
  }
  for (int r : train_repetitions) {
    if (test_repetitions.count(r)) {
      throw Error(ErrorCode::InvalidConfig,
                  "repetition " + std::to_string(r) + " is in both train and test sets");
    }
  }
  auto check_range = [&](const std::set<int>& reps) {
    for (int r : reps) {
      if (r < 1 || r > repetition_count) {
        throw Error(ErrorCode::InvalidConfig, "repetition id " + std::to_string(r) +
                                                  " outside 1.." + std::to_string(repetition_count));
      }
    }
  };
  check_range(train_repetitions);
  check_range(test_repetitions);
}

// ---- subject file -----------------------------------------------------------

std::vector<std::uint8_t> encode_subject_file(const Recording& rec) {
  rec.check_shape();
  const std::size_t t = rec.length();
  const std::size_t c = rec.channels;
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + t * (c * 4 + 3));
  for (char ch : std::string_view("SEMG")) out.push_back(static_cast<std::uint8_t>(ch));
  out.push_back(kSubjectFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.fs_hz));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto f = static_cast<float>(rec.samples[ch * t + i]);
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    put_le<std::uint16_t>(out, rec.class_labels[i]);
    put_le<std::uint8_t>(out, rec.repetition_labels[i]);
  }
  return out;
}

Recording decode_subject_file(std::span<const std::uint8_t> bytes, int subject_id) {
  if (bytes.size() < kHeaderBytes || !std::equal(bytes.begin(), bytes.begin() + 4, "SEMG")) {
    throw Error(ErrorCode::FormatVersionMismatch, "not an SEMG subject file");
  }
  if (bytes[4] != kSubjectFormatVersion) {
    throw Error(ErrorCode::FormatVersionMismatch,
                "unsupported SEMG version " + std::to_string(int{bytes[4]}));
  }
  Recording rec;
  rec.subject_id = subject_id;
  rec.channels = get_le<std::uint32_t>(bytes, 5);
  rec.fs_hz = static_cast<int>(get_le<std::uint32_t>(bytes, 9));
  const auto t = get_le<std::uint64_t>(bytes, 13);
  const std::size_t record_bytes = rec.channels * 4 + 3;
  const std::size_t body = bytes.size() - kHeaderBytes;
  if (rec.channels == 0 || body % record_bytes != 0 || body / record_bytes != t) {
    throw Error(ErrorCode::HeaderShapeMismatch,
                "header declares " + std::to_string(t) + " samples but body holds " +
                    std::to_string(body / std::max<std::size_t>(record_bytes, 1)) +
                    (body % std::max<std::size_t>(record_bytes, 1) ? " plus a partial record" : ""));
  }
  rec.samples.resize(rec.channels * t);
  rec.class_labels.resize(t);
  rec.repetition_labels.resize(t);
  std::size_t off = kHeaderBytes;
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t ch = 0; ch < rec.channels; ++ch) {
      rec.samples[ch * t + i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, off));
      off += 4;
    }
    rec.class_labels[i] = get_le<std::uint16_t>(bytes, off);
    rec.repetition_labels[i] = bytes[off + 2];
    off += 3;
  }
  return rec;
}

void write_subject_file(const std::filesystem::path& path, const Recording& rec) {
  io::write_file(path, encode_subject_file(rec));
}

Recording read_subject_file(const std::filesystem::path& path, int subject_id) {
  if (!std::filesystem::is_regular_file(path)) throw Error(ErrorCode::MissingFile, path.string());
  return decode_subject_file(io::read_file(path), subject_id);
}

// ---- manifest ---------------------------------------------------------------

DatasetManifest parse_manifest(const std::string& json_text) {
  DatasetManifest m;
  try {
    const json j = json::parse(json_text);
    m.name = j.at("name").get<std::string>();
    m.fs_hz = j.at("fs_hz").get<int>();
    m.channels = j.at("channels").get<std::size_t>();
    m.class_count = j.at("class_count").get<int>();
    m.repetition_count = j.at("repetition_count").get<int>();
    m.rest_is_class = j.value("rest_is_class", false);
    for (const auto& s : j.at("subjects")) {
      m.subjects.push_back({s.at("id").get<int>(), s.at("file").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidManifest, e.what());
  }
  if (m.fs_hz <= 0 || m.channels == 0 || m.class_count < 2 || m.repetition_count < 1 ||
      m.repetition_count > 255 || m.class_count > 65536) {
    throw Error(ErrorCode::InvalidManifest, "header fields out of range");
  }
  std::set<int> ids;
  for (const auto& s : m.subjects) {
    if (!ids.insert(s.id).second) {
      throw Error(ErrorCode::InvalidManifest, "duplicate subject id " + std::to_string(s.id));
    }
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json subjects = json::array();
  for (const auto& s : m.subjects) subjects.push_back({{"id", s.id}, {"file", s.file}});
  json j = {{"name", m.name},
            {"fs_hz", m.fs_hz},
            {"channels", m.channels},
            {"class_count", m.class_count},
            {"repetition_count", m.repetition_count},
            {"rest_is_class", m.rest_is_class},
            {"subjects", subjects}};
  return j.dump(2) + "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw Error(ErrorCode::MissingFile, path.string());
  const auto bytes = io::read_file(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  for (const auto& entry : ds.manifest.subjects) {
    const auto path = base / entry.file;
    Recording rec = read_subject_file(path, entry.id);
    if (rec.channels != ds.manifest.channels || rec.fs_hz != ds.manifest.fs_hz) {
      throw Error(ErrorCode::HeaderShapeMismatch,
                  path.string() + ": channels/fs disagree with manifest");
    }
    for (std::size_t i = 0; i < rec.length(); ++i) {
      if (rec.class_labels[i] >= ds.manifest.class_count ||
          rec.repetition_labels[i] > ds.manifest.repetition_count) {
        throw Error(ErrorCode::HeaderShapeMismatch,
                    path.string() + ": label out of declared range at sample " + std::to_string(i));
      }
    }
    ds.recordings.push_back(std::move(rec));
  }
  return ds;
}

std::filesystem::path write_dataset(const std::filesystem::path& out_dir, DatasetManifest manifest,
                                    const std::vector<Recording>& recordings) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string());
  if (manifest.subjects.size() != recordings.size()) {
    manifest.subjects.clear();
    for (const auto& rec : recordings) {
      manifest.subjects.push_back({rec.subject_id, "subject_" + std::to_string(rec.subject_id) + ".semg"});
    }
  }
  for (std::size_t i = 0; i < recordings.size(); ++i) {
    write_subject_file(out_dir / manifest.subjects[i].file, recordings[i]);
  }
  const auto path = out_dir / "manifest.json";
  io::write_text(path, manifest_to_json(manifest));
  return path;
}

// ---- splits -----------------------------------------------------------------

SplitIndices split_indices(const Recording& rec, const SplitSpec& spec) {
  SplitIndices out;
  int owner = 0;
  for (std::size_t i = 0; i < rec.length(); ++i) {
    const bool movement = rec.class_labels[i] != 0 && rec.repetition_labels[i] != 0;
    if (movement) owner = rec.repetition_labels[i];
    // Rest before the first movement has no owner yet and goes to train.
    if (owner == 0 || spec.train_repetitions.count(owner)) {
      out.train.push_back(i);
    } else if (spec.test_repetitions.count(owner)) {
      out.test.push_back(i);
    }
  }
  return out;
}

Recording select_samples(const Recording& rec, std::span<const std::size_t> indices) {
  Recording out;
  out.subject_id = rec.subject_id;
  out.fs_hz = rec.fs_hz;
  out.channels = rec.channels;
  const std::size_t n = indices.size();
  const std::size_t t = rec.length();
  out.samples.resize(rec.channels * n);
  out.class_labels.resize(n);
  out.repetition_labels.resize(n);
  out.origin.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = indices[k];
    out.class_labels[k] = rec.class_labels[i];
    out.repetition_labels[k] = rec.repetition_labels[i];
    out.origin[k] = rec.origin_of(i);
  }
  for (std::size_t c = 0; c < rec.channels; ++c) {
    for (std::size_t k = 0; k < n; ++k) out.samples[c * n + k] = rec.samples[c * t + indices[k]];
  }
  return out;
}

std::pair<Recording, Recording> split_by_repetition(const Recording& rec, const SplitSpec& spec) {
  spec.validate(255);
  const SplitIndices idx = split_indices(rec, spec);
  auto movement_count = [&](const std::vector<std::size_t>& ix) {
    return std::count_if(ix.begin(), ix.end(), [&](std::size_t i) { return rec.class_labels[i] != 0; });
  };
  if (movement_count(idx.train) == 0 || movement_count(idx.test) == 0) {
    throw Error(ErrorCode::EmptySplit, "split leaves a side without movement samples (subject " +
                                           std::to_string(rec.subject_id) + ")");
  }
  return {select_samples(rec, idx.train), select_samples(rec, idx.test)};
}

std::pair<std::vector<Recording>, Recording> split_leave_one_subject_out(
    const std::vector<Recording>& recs, int held_out) {
  std::vector<Recording> rest;
  std::optional<Recording> target;
  for (const auto& r : recs) {
    if (r.subject_id == held_out) {
      target = r;
    } else {
      rest.push_back(r);
    }
  }
  if (!target) throw Error(ErrorCode::UnknownSubject, "subject " + std::to_string(held_out));
  return {std::move(rest), std::move(*target)};
}

// ---- synthetic data ---------------------------------------------------------

void SynthConfig::validate() const {
  if (subjects < 1 || classes < 1 || repetitions < 1 || channels < 1 || fs_hz < 1) {
    throw Error(ErrorCode::InvalidConfig, "synthetic dataset counts must all be >= 1");
  }
  if (repetitions > 255 || classes > 65534) {
    throw Error(ErrorCode::InvalidConfig, "repetitions must fit u8 and classes u16");
  }
  if (fs_hz < 800) {
    throw Error(ErrorCode::InvalidConfig, "synthetic carriers reach 350 Hz; fs_hz must be >= 800");
  }
  if (movement_s <= 0.0 || rest_s < 0.0 || subject_variability < 0.0) {
    throw Error(ErrorCode::InvalidConfig, "durations must be positive");
  }
}

namespace {

struct ClassTemplate {
  double f1 = 0;
  double f2 = 0;
  double envelope_hz = 0;
  double envelope_depth = 0;
  std::vector<double> pattern;  // per channel
};

constexpr std::uint64_t kTemplateTag = 0x7E3A11;
constexpr std::uint64_t kSubjectTag = 0x5B1EC7;
constexpr double kRestNoise = 0.05;
constexpr double kRampSeconds = 0.1;

}  // namespace

std::vector<Recording> synthesize_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const double pi2 = 2.0 * std::numbers::pi;

  Rng shared(derive_seed(cfg.seed, {kTemplateTag}));
  std::vector<ClassTemplate> templates(static_cast<std::size_t>(cfg.classes));
  for (auto& t : templates) {
    t.f1 = shared.uniform(30.0, 170.0);
    t.f2 = shared.uniform(180.0, 350.0);
    t.envelope_hz = shared.uniform(0.5, 3.0);
    t.envelope_depth = shared.uniform(0.2, 0.6);
    t.pattern.resize(cfg.channels);
    for (double& a : t.pattern) a = shared.uniform(0.15, 1.0);
  }

  const auto move_n = static_cast<std::size_t>(std::lround(cfg.movement_s * cfg.fs_hz));
  const auto rest_n = static_cast<std::size_t>(std::lround(cfg.rest_s * cfg.fs_hz));
  const auto ramp_n = std::min<std::size_t>(static_cast<std::size_t>(kRampSeconds * cfg.fs_hz), move_n / 2);
  const std::size_t per_rep = move_n + rest_n;
  const std::size_t total =
      rest_n + static_cast<std::size_t>(cfg.classes) * static_cast<std::size_t>(cfg.repetitions) * per_rep;
  const double fs = cfg.fs_hz;
  const double v = cfg.subject_variability;

  std::vector<Recording> out;
  out.reserve(static_cast<std::size_t>(cfg.subjects));
  for (int s = 1; s <= cfg.subjects; ++s) {
    Rng rng(derive_seed(cfg.seed, {kSubjectTag, static_cast<std::uint64_t>(s)}));
    Recording rec;
    rec.subject_id = s;
    rec.fs_hz = cfg.fs_hz;
    rec.channels = cfg.channels;
    rec.samples.assign(cfg.channels * total, 0.0);
    rec.class_labels.assign(total, 0);
    rec.repetition_labels.assign(total, 0);

    std::vector<double> gain(cfg.channels), offset(cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      gain[c] = rng.uniform(0.5, 1.5);
      offset[c] = rng.uniform(-0.05, 0.05);
    }
    // Subject-specific deformation of every class template.
    std::vector<ClassTemplate> mine = templates;
    const double shift_hz = v * 20.0 * rng.normal();
    for (auto& t : mine) {
      t.f1 = std::clamp(t.f1 + shift_hz, 30.0, 350.0);
      t.f2 = std::clamp(t.f2 + shift_hz, 30.0, 350.0);
      for (double& a : t.pattern) a *= std::exp(v * rng.normal());
    }

    auto sample = [&](std::size_t c, std::size_t i) -> double& { return rec.samples[c * total + i]; };
    for (std::size_t i = 0; i < total; ++i) {
      for (std::size_t c = 0; c < cfg.channels; ++c) sample(c, i) = kRestNoise * rng.normal();
    }

    std::size_t pos = rest_n;
    std::vector<double> phase1(cfg.channels), phase2(cfg.channels);
    for (int k = 1; k <= cfg.classes; ++k) {
      const ClassTemplate& t = mine[static_cast<std::size_t>(k - 1)];
      for (int r = 1; r <= cfg.repetitions; ++r) {
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          phase1[c] = rng.uniform(0.0, pi2);
          phase2[c] = rng.uniform(0.0, pi2);
        }
        const double env_phase = rng.uniform(0.0, pi2);
        for (std::size_t j = 0; j < move_n; ++j) {
          const std::size_t i = pos + j;
          const double time = static_cast<double>(j) / fs;
          double ramp = 1.0;
          if (j < ramp_n) ramp = 0.5 - 0.5 * std::cos(std::numbers::pi * j / ramp_n);
          if (move_n - 1 - j < ramp_n) ramp = 0.5 - 0.5 * std::cos(std::numbers::pi * (move_n - 1 - j) / ramp_n);
          const double env = ramp * (1.0 + t.envelope_depth * std::sin(pi2 * t.envelope_hz * time + env_phase));
          for (std::size_t c = 0; c < cfg.channels; ++c) {
            const double a = t.pattern[c];
            const double carrier =
                std::sin(pi2 * t.f1 * time + phase1[c]) + std::sin(pi2 * t.f2 * time + phase2[c]);
            // Two unit sinusoids carry power a^2; noise at a^2/10 gives 10 dB SNR.
            sample(c, i) += a * env * carrier + a / std::sqrt(10.0) * rng.normal();
          }
          rec.class_labels[i] = static_cast<std::uint16_t>(k);
          rec.repetition_labels[i] = static_cast<std::uint8_t>(r);
        }
        pos += per_rep;
      }
    }
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      for (std::size_t i = 0; i < total; ++i) {
        sample(c, i) = static_cast<float>(gain[c] * sample(c, i) + offset[c]);
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

DatasetManifest synthetic_manifest(const SynthConfig& cfg) {
  DatasetManifest m;
  m.name = "synthetic";
  m.fs_hz = cfg.fs_hz;
  m.channels = cfg.channels;
  m.class_count = cfg.classes + 1;
  m.repetition_count = cfg.repetitions;
  for (int s = 1; s <= cfg.subjects; ++s) {
    m.subjects.push_back({s, "subject_" + std::to_string(s) + ".semg"});
  }
  return m;
}

}  // namespace semg
