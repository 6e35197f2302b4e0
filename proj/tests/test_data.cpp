#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vnode/data.hpp"

using namespace vnode;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// canonical CIFAR batch: labels cycle 0..9, pixel bytes follow a fixed pattern
std::vector<unsigned char> make_cifar_batch(unsigned seed) {
    std::vector<unsigned char> buf(static_cast<std::size_t>(kCifarFileBytes));
    for (std::int64_t r = 0; r < kCifarRecordsPerFile; ++r) {
        unsigned char* rec = buf.data() + r * kCifarRecordBytes;
        rec[0] = static_cast<unsigned char>(r % 10);
        for (std::int64_t i = 0; i < 3072; ++i)
            rec[1 + i] = static_cast<unsigned char>((seed + r * 31 + i * 7) % 256);
    }
    return buf;
}

void be32_put(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> make_idx_images(std::int64_t n, unsigned seed) {
    std::vector<unsigned char> v;
    be32_put(v, 0x803);
    be32_put(v, static_cast<std::uint32_t>(n));
    be32_put(v, 28);
    be32_put(v, 28);
    for (std::int64_t i = 0; i < n * 784; ++i) v.push_back(static_cast<unsigned char>((seed + i * 13) % 256));
    return v;
}

std::vector<unsigned char> make_idx_labels(std::int64_t n) {
    std::vector<unsigned char> v;
    be32_put(v, 0x801);
    be32_put(v, static_cast<std::uint32_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v.push_back(static_cast<unsigned char>(i % 10));
    return v;
}

} // namespace

TEST_CASE("CIFAR-10 loader is bit-exact and total") {
    TempDir dir("vnode_cifar_test");
    for (int i = 1; i <= 5; ++i)
        write_bytes(dir.path / ("data_batch_" + std::to_string(i) + ".bin"),
                    make_cifar_batch(static_cast<unsigned>(i)));
    write_bytes(dir.path / "test_batch.bin", make_cifar_batch(99));

    auto data = load_cifar10<float>(dir.path.string());
    CHECK(data.train.images.shape() == Shape{50000, 3, 32, 32});
    CHECK(data.test.images.shape() == Shape{10000, 3, 32, 32});
    CHECK(data.train.labels.size() == 50000);

    SUBCASE("class balance is exactly 5000 per class") {
        std::vector<int> counts(10, 0);
        for (auto y : data.train.labels) ++counts[static_cast<std::size_t>(y)];
        for (int c : counts) CHECK(c == 5000);
    }

    SUBCASE("decode then re-encode reproduces the source bytes") {
        const auto batch1 = make_cifar_batch(1);
        for (std::int64_t r : {std::int64_t(0), std::int64_t(17), std::int64_t(9999)}) {
            const unsigned char* rec = batch1.data() + r * kCifarRecordBytes;
            CHECK(static_cast<std::int64_t>(rec[0]) == data.train.labels[static_cast<std::size_t>(r)]);
            for (std::int64_t i = 0; i < 3072; ++i) {
                const float p = data.train.images.data()[r * 3072 + i];
                CHECK(static_cast<unsigned char>(std::lround(p * 255.0f)) == rec[1 + i]);
            }
        }
    }

    SUBCASE("first record label is in range") { CHECK(data.train.labels[0] <= 9); }

    SUBCASE("wrong file size is refused with the filename") {
        auto bad = make_cifar_batch(1);
        bad.pop_back();
        write_bytes(dir.path / "data_batch_3.bin", bad);
        try {
            load_cifar10<float>(dir.path.string());
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("data_batch_3.bin") != std::string::npos);
        }
    }

    SUBCASE("label byte over 9 is corruption") {
        auto bad = make_cifar_batch(1);
        bad[0] = 10;
        write_bytes(dir.path / "data_batch_1.bin", bad);
        CHECK_THROWS_AS(load_cifar10<float>(dir.path.string()), DataError);
    }

    SUBCASE("missing file is named") {
        fs::remove(dir.path / "test_batch.bin");
        try {
            load_cifar10<float>(dir.path.string());
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("test_batch.bin") != std::string::npos);
        }
    }
}

TEST_CASE("MNIST IDX loader") {
    TempDir dir("vnode_mnist_test");
    write_bytes(dir.path / "train-images-idx3-ubyte", make_idx_images(40, 3));
    write_bytes(dir.path / "train-labels-idx1-ubyte", make_idx_labels(40));
    write_bytes(dir.path / "t10k-images-idx3-ubyte", make_idx_images(20, 5));
    write_bytes(dir.path / "t10k-labels-idx1-ubyte", make_idx_labels(20));

    SUBCASE("shapes follow the dimension header") {
        auto data = load_mnist<float>(dir.path.string());
        CHECK(data.train.images.shape() == Shape{40, 1, 28, 28});
        CHECK(data.test.images.shape() == Shape{20, 1, 28, 28});
    }

    SUBCASE("pixel 255 maps to 1.0") {
        auto imgs = make_idx_images(1, 0);
        for (std::size_t i = 16; i < imgs.size(); ++i) imgs[i] = 255;
        write_bytes(dir.path / "train-images-idx3-ubyte", imgs);
        write_bytes(dir.path / "train-labels-idx1-ubyte", make_idx_labels(1));
        auto data = load_mnist<double>(dir.path.string());
        for (std::int64_t i = 0; i < 784; ++i) CHECK(data.train.images.data()[i] == 1.0);
    }

    SUBCASE("magic numbers 2051/2049 accepted, others rejected") {
        auto imgs = make_idx_images(4, 0);
        imgs[3] = 0x04; // magic 2052
        write_bytes(dir.path / "train-images-idx3-ubyte", imgs);
        CHECK_THROWS_AS(load_mnist<float>(dir.path.string()), DataError);

        write_bytes(dir.path / "train-images-idx3-ubyte", make_idx_images(4, 0));
        auto labels = make_idx_labels(4);
        labels[3] = 0x03;
        write_bytes(dir.path / "train-labels-idx1-ubyte", labels);
        CHECK_THROWS_AS(load_mnist<float>(dir.path.string()), DataError);
    }

    SUBCASE("image/label count mismatch is refused") {
        write_bytes(dir.path / "train-labels-idx1-ubyte", make_idx_labels(39));
        CHECK_THROWS_AS(load_mnist<float>(dir.path.string()), DataError);
    }
}

TEST_CASE("normalization round-trips") {
    Rng rng(81);
    Dataset<double> ds;
    ds.images = uniform_tensor<double>({10, 3, 6, 6}, rng, 0, 1);
    ds.labels.assign(10, 0);
    compute_norm_stats(ds);
    auto normed = normalize_images(ds.images, ds.norm_mean, ds.norm_std);
    auto back = denormalize_images(normed, ds.norm_mean, ds.norm_std);
    CHECK(rel_error(back, ds.images) < 1e-6);

    // normalized data has near-zero mean per channel
    for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::int64_t i = 0; i < 10; ++i)
            for (std::int64_t k = 0; k < 36; ++k) m += normed.data()[(i * 3 + c) * 36 + k];
        CHECK(std::abs(m / 360.0) < 1e-10);
    }
}

TEST_CASE("first-K-per-class subset") {
    Dataset<float> ds;
    ds.num_classes = 3;
    ds.images = Tensor<float>(Shape{9, 1, 1, 1});
    for (std::int64_t i = 0; i < 9; ++i) ds.images.data()[i] = static_cast<float>(i);
    ds.labels = {0, 0, 1, 2, 1, 0, 2, 1, 2};
    auto sub = subset_per_class(ds, 2);
    CHECK(sub.size() == 6);
    CHECK(sub.labels == std::vector<std::int64_t>{0, 0, 1, 2, 1, 2});
    CHECK(sub.images.data()[0] == 0.0f); // kept in file order
    CHECK(sub.images.data()[5] == 6.0f);
}

TEST_CASE("augmentation") {
    Rng rng(82);
    Tensor<double> batch = uniform_tensor<double>({3, 3, 8, 8}, rng, 0, 1);

    SUBCASE("null policy is the identity") {
        AugmentPolicy none{0, 0.0};
        Rng r(1);
        CHECK(tensors_equal(augment_batch(batch, none, r), batch));
    }
    SUBCASE("flip is an involution") {
        AugmentPolicy flip{0, 1.0};
        Rng r1(1), r2(2);
        auto once = augment_batch(batch, flip, r1);
        auto twice = augment_batch(once, flip, r2);
        CHECK(tensors_equal(twice, batch));
    }
    SUBCASE("fixed seed reproduces the augmented batch") {
        AugmentPolicy policy{4, 0.5};
        Rng r1(7), r2(7);
        CHECK(tensors_equal(augment_batch(batch, policy, r1), augment_batch(batch, policy, r2)));
    }
    SUBCASE("crops stay label-preserving in shape") {
        AugmentPolicy policy{4, 0.5};
        Rng r(3);
        CHECK(augment_batch(batch, policy, r).shape() == batch.shape());
    }
}

TEST_CASE("epoch batching") {
    Rng rng(83);
    auto batches = epoch_batches(103, 10, rng);
    CHECK(batches.size() == 11); // ceil(103/10)
    CHECK(batches.back().size() == 3);

    std::vector<int> seen(103, 0);
    for (const auto& b : batches)
        for (auto i : b) ++seen[static_cast<std::size_t>(i)];
    for (int s : seen) CHECK(s == 1); // partition, no duplicates

    Rng r1(5), r2(5);
    CHECK(epoch_batches(50, 8, r1) == epoch_batches(50, 8, r2));
}
