#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "vssm/data.hpp"

using namespace vssm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / "vssm_data_test";
    fs::create_directories(dir);
    return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void push_be(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_file(std::uint32_t magic, std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                   const std::vector<std::uint8_t>& pixels) {
    std::vector<std::uint8_t> b;
    push_be(b, magic);
    push_be(b, count);
    push_be(b, rows);
    push_be(b, cols);
    b.insert(b.end(), pixels.begin(), pixels.end());
    return b;
}

SequenceDataset counting_dataset(std::size_t n) {
    SequenceDataset ds{2, 1, {}, "synthetic", "none"};
    for (std::size_t i = 0; i < n; ++i) {
        ds.values.push_back(float(i));
        ds.values.push_back(float(i) + 0.5f);
    }
    return ds;
}

}  // namespace

TEST(Mnist, LoadsRowsScaledToUnitInterval) {
    std::vector<std::uint8_t> pixels(2 * 28 * 28, 0);
    pixels[28 * 28 + 5] = 255;
    pixels[28 * 28 + 6] = 51;
    auto p = temp_file("ok.idx");
    write_bytes(p, idx_file(0x803, 2, 28, 28, pixels));
    auto ds = load_mnist(p);
    EXPECT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.T, 28u);
    EXPECT_EQ(ds.D, 28u);
    EXPECT_EQ(ds.provenance, "mnist");
    for (float v : ds.item(0)) EXPECT_EQ(v, 0.f);
    EXPECT_EQ(ds.item(1)[5], 1.0f);
    EXPECT_EQ(ds.item(1)[6], 0.2f);
    EXPECT_EQ(load_mnist(p, 1).size(), 1u);
    // loading twice gives identical data
    EXPECT_EQ(load_mnist(p).values, ds.values);
}

TEST(Mnist, RejectsBadContainers) {
    auto bad_magic = temp_file("magic.idx");
    write_bytes(bad_magic, idx_file(0x801, 1, 28, 28, std::vector<std::uint8_t>(784)));
    EXPECT_THROW(load_mnist(bad_magic), FormatError);
    auto short_file = temp_file("short.idx");
    write_bytes(short_file, idx_file(0x803, 2, 28, 28, std::vector<std::uint8_t>(784)));
    EXPECT_THROW(load_mnist(short_file), FormatError);
    EXPECT_THROW(load_mnist(temp_file("does_not_exist.idx")), IoError);
}

TEST(Mnist, BundledSubsetParsesWhenPresent) {
    const fs::path p = VSSM_MNIST_IDX;
    if (!fs::exists(p)) GTEST_SKIP() << "no MNIST file at " << p;
    auto ds = load_mnist(p, 100);
    EXPECT_EQ(ds.size(), 100u);
    EXPECT_EQ(ds.T * ds.D, 784u);
    for (float v : ds.values) ASSERT_TRUE(v >= 0.f && v <= 1.f);
}

TEST(Cifar, InterleavesChannelsAndRoundTrips) {
    std::mt19937_64 gen(1);
    std::vector<std::uint8_t> file;
    std::vector<std::vector<std::uint8_t>> planes;
    for (int r = 0; r < 3; ++r) {
        file.push_back(static_cast<std::uint8_t>(r));  // label
        std::vector<std::uint8_t> img(3072);
        for (auto& b : img) b = static_cast<std::uint8_t>(gen());
        planes.push_back(img);
        file.insert(file.end(), img.begin(), img.end());
    }
    auto p = temp_file("batch.bin");
    write_bytes(p, file);
    auto ds = load_cifar({p});
    ASSERT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.T, 32u);
    EXPECT_EQ(ds.D, 96u);
    // row 2, pixel 7, green channel
    EXPECT_EQ(ds.item(1)[2 * 96 + 7 * 3 + 1], float(planes[1][1024 + 2 * 32 + 7]) / 255.f);
    for (int r = 0; r < 3; ++r) EXPECT_EQ(cifar_planes(ds.item(r)), planes[r]);
    EXPECT_EQ(load_cifar({p, p}).size(), 6u);
}

TEST(Cifar, TruncatedRecordIsFormatError) {
    auto p = temp_file("trunc.bin");
    write_bytes(p, std::vector<std::uint8_t>(3073 + 100));
    EXPECT_THROW(load_cifar({p}), FormatError);
}

TEST(Split, SizesPartitionAndDeterminism) {
    SequenceDataset ds{1, 1, std::vector<float>(60000), "synthetic", "none"};
    for (std::size_t i = 0; i < ds.values.size(); ++i) ds.values[i] = float(i);
    auto [train, valid] = split_train_valid(ds, 0.1, 7);
    EXPECT_EQ(train.size(), 54000u);
    EXPECT_EQ(valid.size(), 6000u);
    std::vector<float> all = train.values;
    all.insert(all.end(), valid.values.begin(), valid.values.end());
    std::ranges::sort(all);
    EXPECT_EQ(all, ds.values);
    auto again = split_train_valid(ds, 0.1, 7);
    EXPECT_EQ(again.second.values, valid.values);
    EXPECT_NE(split_train_valid(ds, 0.1, 8).second.values, valid.values);
}

TEST(Split, DegenerateFractionsAreUsageErrors) {
    auto ds = counting_dataset(10);
    EXPECT_THROW(split_train_valid(ds, 0.0, 1), UsageError);
    EXPECT_THROW(split_train_valid(ds, 1.0, 1), UsageError);
    EXPECT_THROW(split_train_valid(ds, 0.01, 1), UsageError);
}

TEST(RandomCut, UniformOverAllCutPoints) {
    Tensorf x(Shape{28, 2}, 0.5f);
    const CounterRng rng(3);
    const int draws = 100000;
    std::vector<int> counts(29, 0);
    for (int i = 0; i < draws; ++i) {
        auto [C, prompt] = random_cut(x, rng, static_cast<std::uint64_t>(i));
        ++counts[C];
        if (i < 200) {
            for (std::size_t t = 0; t < 28; ++t) ASSERT_EQ(prompt.values[t * 3 + 2], t < C ? 1.f : 0.f);
        }
    }
    const double p = 1.0 / 29, se = std::sqrt(p * (1 - p) / draws);
    for (int c = 0; c <= 28; ++c) EXPECT_NEAR(double(counts[c]) / draws, p, 3 * se) << "C=" << c;
}

TEST(RandomCut, Boundaries) {
    Tensorf x(Shape{4, 2}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});
    auto empty = make_padded_prompt(x, 0, 4, 2);
    for (float v : empty.values.data()) EXPECT_EQ(v, 0.f);
    auto full = make_padded_prompt(x, 4, 4, 2);
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(full.values[t * 3 + 2], 1.f);
        EXPECT_EQ(full.values[t * 3], x[t * 2]);
    }
}

TEST(Synthetic, ReproducibleFromSeed) {
    VssmHyper h;
    h.T = 5;
    h.D = 2;
    h.Z = 1;
    h.N = 3;
    h.width = 4;
    h.state = 2;
    h.hidden = 4;
    h.layers = 1;
    auto m = VssmModel<float>::init(h, 1);
    auto a = synthetic_dataset(m, 6, 9), b = synthetic_dataset(m, 6, 9);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(a.size(), 6u);
    EXPECT_NE(synthetic_dataset(m, 6, 10).values, a.values);
    EXPECT_NE(a.sequence(0), a.sequence(1));
}

TEST(Dataset, BatchAndSubset) {
    auto ds = counting_dataset(5);
    std::vector<std::size_t> idx{3, 0};
    Tensorf b = ds.batch(idx);
    EXPECT_EQ(b.shape(), (Shape{2, 2, 1}));
    EXPECT_EQ(b[0], 3.f);
    EXPECT_EQ(b[3], 0.5f);
    EXPECT_EQ(ds.subset(idx).values, (std::vector<float>{3.f, 3.5f, 0.f, 0.5f}));
    EXPECT_THROW(ds.item(5), UsageError);
}
