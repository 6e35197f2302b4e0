#pragma once

// Dataset ingestion and batching. Loaders are bit-exact and total: every
// byte of every file is consumed and validated, bad sizes or labels are
// refused with the offending filename. Pixels are scaled to [0,1]; per-
// channel normalization constants are computed from the training split and
// applied at batch assembly.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vnode/rng.hpp"
#include "vnode/tensor.hpp"

namespace vnode {

template <typename T>
struct Dataset {
    Tensor<T> images; // [N,C,H,W], values in [0,1]
    std::vector<std::int64_t> labels;
    std::string split;
    int num_classes = 10;
    std::vector<double> norm_mean, norm_std; // per channel; empty until set

    std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
    std::int64_t channels() const { return images.dim(1); }
};

namespace data_detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open dataset file: " + path);
    f.seekg(0, std::ios::end);
    const auto len = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<unsigned char> buf(len);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
    if (!f) throw DataError("short read from dataset file: " + path);
    return buf;
}

inline std::uint32_t be32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

} // namespace data_detail

// -------------------------------------------------------------- CIFAR-10 ---

inline constexpr std::int64_t kCifarRecordBytes = 3073;  // 1 label + 3*1024 pixels
inline constexpr std::int64_t kCifarRecordsPerFile = 10000;
inline constexpr std::int64_t kCifarFileBytes = kCifarRecordsPerFile * kCifarRecordBytes;

// One canonical batch file appended into images/labels.
template <typename T>
void load_cifar10_file(const std::string& path, T* images, std::vector<std::int64_t>& labels) {
    const auto buf = data_detail::read_file(path);
    if (static_cast<std::int64_t>(buf.size()) != kCifarFileBytes)
        throw DataError(path + ": expected " + std::to_string(kCifarFileBytes) + " bytes, found " +
                        std::to_string(buf.size()));
    for (std::int64_t r = 0; r < kCifarRecordsPerFile; ++r) {
        const unsigned char* rec = buf.data() + r * kCifarRecordBytes;
        if (rec[0] > 9) throw DataError(path + ": corrupt label " + std::to_string(rec[0]) + " in record " +
                                        std::to_string(r));
        labels.push_back(rec[0]);
        T* dst = images + (static_cast<std::int64_t>(labels.size()) - 1) * 3072;
        for (std::int64_t i = 0; i < 3072; ++i) dst[i] = static_cast<T>(rec[1 + i]) / static_cast<T>(255);
    }
}

template <typename T>
struct DatasetPair {
    Dataset<T> train, test;
};

// dir must hold data_batch_1..5.bin and test_batch.bin
template <typename T>
DatasetPair<T> load_cifar10(const std::string& dir) {
    namespace fs = std::filesystem;
    DatasetPair<T> out;
    out.train.images = Tensor<T>(Shape{50000, 3, 32, 32});
    out.train.split = "train";
    for (int i = 1; i <= 5; ++i)
        load_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(),
                          out.train.images.data(), out.train.labels);
    out.test.images = Tensor<T>(Shape{10000, 3, 32, 32});
    out.test.split = "test";
    load_cifar10_file((fs::path(dir) / "test_batch.bin").string(), out.test.images.data(), out.test.labels);
    return out;
}

// ----------------------------------------------------------------- MNIST ---

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803; // 2051
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801; // 2049

template <typename T>
Dataset<T> load_mnist_split(const std::string& images_path, const std::string& labels_path,
                            const std::string& split) {
    const auto ibuf = data_detail::read_file(images_path);
    if (ibuf.size() < 16) throw DataError(images_path + ": IDX header truncated");
    if (data_detail::be32(ibuf.data()) != kIdxImagesMagic)
        throw DataError(images_path + ": bad IDX magic " + std::to_string(data_detail::be32(ibuf.data())) +
                        " (want 2051)");
    const std::int64_t n = data_detail::be32(ibuf.data() + 4);
    const std::int64_t rows = data_detail::be32(ibuf.data() + 8);
    const std::int64_t cols = data_detail::be32(ibuf.data() + 12);
    if (static_cast<std::int64_t>(ibuf.size()) != 16 + n * rows * cols)
        throw DataError(images_path + ": expected " + std::to_string(16 + n * rows * cols) + " bytes, found " +
                        std::to_string(ibuf.size()));

    const auto lbuf = data_detail::read_file(labels_path);
    if (lbuf.size() < 8) throw DataError(labels_path + ": IDX header truncated");
    if (data_detail::be32(lbuf.data()) != kIdxLabelsMagic)
        throw DataError(labels_path + ": bad IDX magic " + std::to_string(data_detail::be32(lbuf.data())) +
                        " (want 2049)");
    if (static_cast<std::int64_t>(data_detail::be32(lbuf.data() + 4)) != n)
        throw DataError(labels_path + ": label count does not match image count");
    if (static_cast<std::int64_t>(lbuf.size()) != 8 + n)
        throw DataError(labels_path + ": expected " + std::to_string(8 + n) + " bytes, found " +
                        std::to_string(lbuf.size()));

    Dataset<T> ds;
    ds.split = split;
    ds.images = Tensor<T>(Shape{n, 1, rows, cols});
    for (std::int64_t i = 0; i < n * rows * cols; ++i)
        ds.images.data()[i] = static_cast<T>(ibuf[16 + i]) / static_cast<T>(255);
    for (std::int64_t i = 0; i < n; ++i) {
        if (lbuf[8 + i] > 9)
            throw DataError(labels_path + ": corrupt label " + std::to_string(lbuf[8 + i]) + " at index " +
                            std::to_string(i));
        ds.labels.push_back(lbuf[8 + i]);
    }
    return ds;
}

template <typename T>
DatasetPair<T> load_mnist(const std::string& dir) {
    namespace fs = std::filesystem;
    DatasetPair<T> out;
    out.train = load_mnist_split<T>((fs::path(dir) / "train-images-idx3-ubyte").string(),
                                    (fs::path(dir) / "train-labels-idx1-ubyte").string(), "train");
    out.test = load_mnist_split<T>((fs::path(dir) / "t10k-images-idx3-ubyte").string(),
                                   (fs::path(dir) / "t10k-labels-idx1-ubyte").string(), "test");
    return out;
}

// ---------------------------------------------------------- normalization ---

// per-channel mean and std over every pixel of ds (f64 accumulation)
template <typename T>
void compute_norm_stats(Dataset<T>& ds) {
    const std::int64_t n = ds.size(), c = ds.images.dim(1), hw = ds.images.dim(2) * ds.images.dim(3);
    ds.norm_mean.assign(static_cast<std::size_t>(c), 0.0);
    ds.norm_std.assign(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sum(static_cast<std::size_t>(c), 0.0), sq(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* p = ds.images.data() + (i * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
                sum[static_cast<std::size_t>(ch)] += static_cast<double>(p[k]);
                sq[static_cast<std::size_t>(ch)] += static_cast<double>(p[k]) * static_cast<double>(p[k]);
            }
        }
    const double count = static_cast<double>(n * hw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double m = sum[static_cast<std::size_t>(ch)] / count;
        const double var = sq[static_cast<std::size_t>(ch)] / count - m * m;
        ds.norm_mean[static_cast<std::size_t>(ch)] = m;
        ds.norm_std[static_cast<std::size_t>(ch)] = std::sqrt(std::max(var, 1e-12));
    }
}

template <typename T>
Tensor<T> normalize_images(const Tensor<T>& images, const std::vector<double>& mean,
                           const std::vector<double>& stdev) {
    const std::int64_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
    if (static_cast<std::int64_t>(mean.size()) != c || static_cast<std::int64_t>(stdev.size()) != c)
        throw ContractError("normalize: stats do not match channel count");
    Tensor<T> out(images.shape());
    for (std::int64_t i = 0; i < n * c; ++i) {
        const std::int64_t ch = i % c;
        const T m = static_cast<T>(mean[static_cast<std::size_t>(ch)]);
        const T inv = static_cast<T>(1.0 / stdev[static_cast<std::size_t>(ch)]);
        const T* src = images.data() + i * hw;
        T* dst = out.data() + i * hw;
        for (std::int64_t k = 0; k < hw; ++k) dst[k] = (src[k] - m) * inv;
    }
    return out;
}

template <typename T>
Tensor<T> denormalize_images(const Tensor<T>& images, const std::vector<double>& mean,
                             const std::vector<double>& stdev) {
    const std::int64_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
    Tensor<T> out(images.shape());
    for (std::int64_t i = 0; i < n * c; ++i) {
        const std::int64_t ch = i % c;
        const T m = static_cast<T>(mean[static_cast<std::size_t>(ch)]);
        const T s = static_cast<T>(stdev[static_cast<std::size_t>(ch)]);
        const T* src = images.data() + i * hw;
        T* dst = out.data() + i * hw;
        for (std::int64_t k = 0; k < hw; ++k) dst[k] = src[k] * s + m;
    }
    return out;
}

// --------------------------------------------------------------- subsets ---

// deterministic first-K-per-class selection in file order
template <typename T>
Dataset<T> subset_per_class(const Dataset<T>& ds, std::int64_t per_class) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(ds.num_classes), 0);
    std::vector<std::int64_t> keep;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const auto y = static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)]);
        if (counts[y] < per_class) {
            ++counts[y];
            keep.push_back(i);
        }
    }
    Dataset<T> out;
    out.split = ds.split;
    out.num_classes = ds.num_classes;
    out.norm_mean = ds.norm_mean;
    out.norm_std = ds.norm_std;
    const std::int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    out.images = Tensor<T>(Shape{static_cast<std::int64_t>(keep.size()), c, h, w});
    const std::int64_t stride = c * h * w;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        std::copy(ds.images.data() + keep[i] * stride, ds.images.data() + (keep[i] + 1) * stride,
                  out.images.data() + static_cast<std::int64_t>(i) * stride);
        out.labels.push_back(ds.labels[static_cast<std::size_t>(keep[i])]);
    }
    return out;
}

// ---------------------------------------------------------- augmentation ---

struct AugmentPolicy {
    int crop_pad = 4;      // zero-pad then random crop back to size
    double flip_prob = 0.5; // horizontal flip
};

// label-preserving random crop + flip on raw [0,1] images
template <typename T>
Tensor<T> augment_batch(const Tensor<T>& images, const AugmentPolicy& policy, Rng& rng) {
    const std::int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    Tensor<T> out(images.shape());
    const int pad = policy.crop_pad;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t oy =
            pad > 0 ? static_cast<std::int64_t>(rng.integer(static_cast<std::uint64_t>(2 * pad + 1))) : 0;
        const std::int64_t ox =
            pad > 0 ? static_cast<std::int64_t>(rng.integer(static_cast<std::uint64_t>(2 * pad + 1))) : 0;
        const bool flip = policy.flip_prob > 0 && rng.bernoulli(policy.flip_prob);
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* src = images.data() + (i * c + ch) * h * w;
            T* dst = out.data() + (i * c + ch) * h * w;
            for (std::int64_t y = 0; y < h; ++y) {
                const std::int64_t sy = y + oy - pad;
                for (std::int64_t x = 0; x < w; ++x) {
                    const std::int64_t sx0 = x + ox - pad;
                    const std::int64_t sx = flip ? (w - 1 - sx0) : sx0;
                    const bool in = sy >= 0 && sy < h && sx >= 0 && sx < w && sx0 >= 0 && sx0 < w;
                    dst[y * w + x] = in ? src[sy * w + sx] : T{};
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------- batches ---

// one epoch: a seeded permutation split into batches, last partial kept
inline std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t n, std::int64_t batch_size, Rng& rng,
                                                            bool shuffle = true) {
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    if (shuffle) rng.shuffle(order);
    std::vector<std::vector<std::int64_t>> out;
    for (std::int64_t b = 0; b < n; b += batch_size) {
        const std::int64_t e = std::min(n, b + batch_size);
        out.emplace_back(order.begin() + b, order.begin() + e);
    }
    return out;
}

template <typename T>
struct Batch {
    Tensor<T> images;
    std::vector<std::int64_t> labels;
};

// gathers raw images + labels for the given indices
template <typename T>
Batch<T> gather_batch(const Dataset<T>& ds, const std::vector<std::int64_t>& idx) {
    const std::int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    const std::int64_t stride = c * h * w;
    Batch<T> b;
    b.images = Tensor<T>(Shape{static_cast<std::int64_t>(idx.size()), c, h, w});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(ds.images.data() + idx[i] * stride, ds.images.data() + (idx[i] + 1) * stride,
                  b.images.data() + static_cast<std::int64_t>(i) * stride);
        b.labels.push_back(ds.labels[static_cast<std::size_t>(idx[i])]);
    }
    return b;
}

} // namespace vnode
