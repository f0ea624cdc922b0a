#include "shike/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "shike/archive.hpp"
#include "shike/errors.hpp"

namespace shike {

LongTailSpec LongTailSpec::from_counts(std::vector<std::size_t> counts) {
  LongTailSpec spec;
  spec.num_classes = counts.size();
  spec.counts = std::move(counts);
  spec.validate();
  spec.imbalance_factor =
      static_cast<double>(spec.counts.front()) / static_cast<double>(spec.counts.back());
  return spec;
}

std::size_t LongTailSpec::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

void LongTailSpec::validate() const {
  if (counts.empty() || counts.size() != num_classes)
    throw InvalidArgument("long-tail spec: counts must have num_classes entries");
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw InvalidArgument("long-tail spec: class " + std::to_string(c) + " has zero samples");
    if (c > 0 && counts[c] > counts[c - 1])
      throw InvalidArgument("long-tail spec: counts must be non-increasing (class " + std::to_string(c) + ")");
  }
}

const char* split_name(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> out(spec.num_classes, 0);
  for (auto y : labels) ++out.at(y);
  return out;
}

std::vector<std::size_t> make_longtail_counts(std::size_t num_classes, std::size_t n_max, double imbalance_factor) {
  if (!(imbalance_factor >= 1.0) || !std::isfinite(imbalance_factor))
    throw InvalidArgument("imbalance_factor must be a finite value >= 1");
  if (num_classes == 0) throw InvalidArgument("num_classes must be positive");
  if (static_cast<double>(n_max) < imbalance_factor)
    throw InvalidArgument("n_max must be >= imbalance_factor, otherwise the tail class is empty");
  if (num_classes == 1) {
    if (imbalance_factor != 1.0) throw InvalidArgument("a single class requires imbalance_factor = 1");
    return {n_max};
  }
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double t = static_cast<double>(c) / static_cast<double>(num_classes - 1);
    const double v = static_cast<double>(n_max) / std::pow(imbalance_factor, t);
    counts[c] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(v + 0.5)));
  }
  return counts;
}

ClassDivision split_divisions(const LongTailSpec& spec) {
  ClassDivision d;
  for (std::size_t c = 0; c < spec.counts.size(); ++c) {
    const auto n = spec.counts[c];
    if (n > 100)
      d.many.push_back(c);
    else if (n < 20)
      d.few.push_back(c);
    else
      d.medium.push_back(c);
  }
  return d;
}

LabeledDataset subsample_longtail(const LabeledDataset& balanced, std::span<const std::size_t> counts,
                                  std::uint64_t seed) {
  LongTailSpec spec = LongTailSpec::from_counts({counts.begin(), counts.end()});
  std::vector<std::vector<std::size_t>> by_class(spec.num_classes);
  for (std::size_t i = 0; i < balanced.size(); ++i) {
    const auto y = balanced.labels[i];
    if (y < spec.num_classes) by_class[y].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> picked;
  picked.reserve(spec.total());
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < spec.counts[c])
      throw InvalidArgument("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                            " source samples but " + std::to_string(spec.counts[c]) + " were requested");
    std::shuffle(pool.begin(), pool.end(), rng);
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.counts[c]));
  }
  std::shuffle(picked.begin(), picked.end(), rng);
  LabeledDataset out;
  out.inputs = gather_rows(balanced.inputs, picked);
  out.labels.reserve(picked.size());
  for (auto i : picked) out.labels.push_back(balanced.labels[i]);
  out.spec = std::move(spec);
  out.split = Split::train;
  return out;
}

std::pair<LabeledDataset, LabeledDataset> synth_gaussian_lt(std::size_t num_classes, std::size_t dims,
                                                            std::span<const std::size_t> counts,
                                                            double class_separation, std::uint64_t seed,
                                                            const SynthOptions& options) {
  if (num_classes < 2) throw InvalidArgument("synthetic benchmark needs at least 2 classes");
  if (dims < 1) throw InvalidArgument("synthetic benchmark needs dims >= 1");
  if (counts.size() != num_classes) throw InvalidArgument("counts must have num_classes entries");
  if (!(class_separation >= 0.0)) throw InvalidArgument("class_separation must be >= 0");
  if (options.modes_per_class == 0) throw InvalidArgument("modes_per_class must be positive");
  LongTailSpec spec = LongTailSpec::from_counts({counts.begin(), counts.end()});

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t modes = options.modes_per_class;
  std::vector<double> means(num_classes * modes * dims);
  for (std::size_t k = 0; k < num_classes * modes; ++k) {
    double norm = 0.0;
    double* m = means.data() + k * dims;
    do {
      norm = 0.0;
      for (std::size_t d = 0; d < dims; ++d) {
        m[d] = normal(rng);
        norm += m[d] * m[d];
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < dims; ++d) m[d] *= class_separation / norm;
  }

  auto draw = [&](std::span<const std::size_t> per_class, Split split) {
    const std::size_t n = std::accumulate(per_class.begin(), per_class.end(), std::size_t{0});
    LabeledDataset ds;
    ds.inputs = Tensor({n, dims});
    ds.labels.reserve(n);
    ds.spec = spec;
    ds.split = split;
    std::uniform_int_distribution<std::size_t> pick_mode(0, modes - 1);
    std::size_t row = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
      for (std::size_t i = 0; i < per_class[c]; ++i, ++row) {
        const double* m = means.data() + (c * modes + (modes > 1 ? pick_mode(rng) : 0)) * dims;
        for (std::size_t d = 0; d < dims; ++d) ds.inputs[row * dims + d] = m[d] + options.noise_std * normal(rng);
        ds.labels.push_back(c);
      }
    return ds;
  };
  LabeledDataset train = draw(spec.counts, Split::train);
  const std::vector<std::size_t> balanced(num_classes, options.test_per_class);
  LabeledDataset test = draw(balanced, Split::test);
  return {std::move(train), std::move(test)};
}

LabeledDataset read_record_archive(const std::filesystem::path& path, const ArchiveLayout& layout,
                                   std::size_t num_classes, Split split) {
  if (layout.label_index >= layout.label_bytes) throw InvalidArgument("label_index must be < label_bytes");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open record archive: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t pixels = shape_numel(layout.sample_shape);
  const std::size_t record = layout.label_bytes + pixels;
  if (bytes.empty() || bytes.size() % record != 0)
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of record size " +
                      std::to_string(record));
  const std::size_t n = bytes.size() / record;
  Shape shape{n};
  shape.insert(shape.end(), layout.sample_shape.begin(), layout.sample_shape.end());
  LabeledDataset ds;
  ds.inputs = Tensor(shape);
  ds.labels.resize(n);
  ds.split = split;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data() + i * record);
    const std::size_t y = rec[layout.label_index];
    if (y >= num_classes)
      throw FormatError(path.string() + ": record " + std::to_string(i) + " has label " + std::to_string(y) +
                        " >= num_classes " + std::to_string(num_classes));
    ds.labels[i] = y;
    for (std::size_t p = 0; p < pixels; ++p)
      ds.inputs[i * pixels + p] = layout.scale * static_cast<double>(rec[layout.label_bytes + p]);
  }
  ds.spec.num_classes = num_classes;
  ds.spec.counts.assign(num_classes, 0);
  for (auto y : ds.labels) ++ds.spec.counts[y];
  const auto [lo, hi] = std::minmax_element(ds.spec.counts.begin(), ds.spec.counts.end());
  ds.spec.imbalance_factor = *lo > 0 ? static_cast<double>(*hi) / static_cast<double>(*lo) : 0.0;
  return ds;
}

void write_record_archive(const std::filesystem::path& path, const ArchiveLayout& layout,
                          std::span<const std::uint8_t> labels, std::span<const std::uint8_t> pixels) {
  const std::size_t per = shape_numel(layout.sample_shape);
  const std::size_t n = labels.size() / layout.label_bytes;
  if (labels.size() % layout.label_bytes != 0 || pixels.size() != n * per)
    throw InvalidArgument("record archive: label/pixel buffer sizes disagree with the layout");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  for (std::size_t i = 0; i < n; ++i) {
    os.write(reinterpret_cast<const char*>(labels.data() + i * layout.label_bytes),
             static_cast<std::streamsize>(layout.label_bytes));
    os.write(reinterpret_cast<const char*>(pixels.data() + i * per), static_cast<std::streamsize>(per));
  }
}

nlohmann::json dataset_manifest(const LongTailSpec& spec, std::uint64_t seed) {
  const ClassDivision d = split_divisions(spec);
  return {{"num_classes", spec.num_classes},
          {"counts", spec.counts},
          {"imbalance_factor", spec.imbalance_factor},
          {"seed", seed},
          {"total", spec.total()},
          {"division_sizes", {{"many", d.many.size()}, {"medium", d.medium.size()}, {"few", d.few.size()}}}};
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
  ArrayArchive ar;
  ar.header = {{"kind", "dataset"},
               {"split", split_name(ds.split)},
               {"num_classes", ds.spec.num_classes},
               {"counts", ds.spec.counts},
               {"imbalance_factor", ds.spec.imbalance_factor}};
  ar.arrays.emplace_back("inputs", ds.inputs);
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  ar.arrays.emplace_back("labels", Tensor({ds.labels.size()}, std::move(labels)));
  write_archive(path, ar);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  const ArrayArchive ar = read_archive(path);
  if (ar.header.value("kind", "") != "dataset") throw FormatError(path.string() + " is not a dataset archive");
  LabeledDataset ds;
  ds.split = ar.header.at("split") == "train" ? Split::train : Split::test;
  ds.spec.num_classes = ar.header.at("num_classes").get<std::size_t>();
  ds.spec.counts = ar.header.at("counts").get<std::vector<std::size_t>>();
  ds.spec.imbalance_factor = ar.header.at("imbalance_factor").get<double>();
  ds.inputs = ar.get("inputs");
  const Tensor& labels = ar.get("labels");
  if (labels.size() != ds.inputs.dim(0)) throw FormatError(path.string() + ": label/input count mismatch");
  ds.labels.reserve(labels.size());
  for (double y : labels.values()) {
    if (y < 0 || y >= static_cast<double>(ds.spec.num_classes))
      throw FormatError(path.string() + ": label out of range");
    ds.labels.push_back(static_cast<std::size_t>(y));
  }
  return ds;
}

}  // namespace shike
