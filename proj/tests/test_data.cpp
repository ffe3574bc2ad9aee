#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "scan/data.hpp"
#include "scan/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kData = SCAN_TEST_DATA_DIR;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("scan_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Parses the "# name" / hex-byte-row dump next to the fixtures.
std::map<std::string, std::string> read_hex_dump(const fs::path& p) {
    std::ifstream in(p);
    std::map<std::string, std::string> out;
    std::string line, current;
    while (std::getline(in, line)) {
        if (line.rfind("# ", 0) == 0) {
            current = line.substr(2);
            continue;
        }
        std::istringstream row(line);
        std::string byte;
        while (row >> byte) out[current].push_back(static_cast<char>(std::stoi(byte, nullptr, 16)));
    }
    return out;
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Idx, ReferenceFilesMatchHexDump) {
    const auto dump = read_hex_dump(kData / "idx_small.hex");
    ASSERT_EQ(dump.size(), 2u);
    EXPECT_EQ(scan::read_bytes(kData / "idx_small" / "train-images-idx3-ubyte"), dump.at("train-images-idx3-ubyte"));
    EXPECT_EQ(scan::read_bytes(kData / "idx_small" / "train-labels-idx1-ubyte"), dump.at("train-labels-idx1-ubyte"));
}

TEST(Idx, ParsesReferencePair) {
    auto ds = scan::load_idx(kData / "idx_small" / "train-images-idx3-ubyte",
                             kData / "idx_small" / "train-labels-idx1-ubyte");
    ASSERT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.height, 2u);
    EXPECT_EQ(ds.width, 3u);
    EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{7, 0, 9}));
    // Bytes from the dump, row-major per image.
    const int bytes[] = {0x00, 0xff, 0x80, 0x01, 0x7f, 0x40, 0x10, 0x20, 0x30,
                         0x40, 0x50, 0x60, 0xfe, 0x00, 0x00, 0x00, 0x00, 0xff};
    ASSERT_EQ(ds.pixels.size(), 18u);
    for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(ds.pixels[i], static_cast<float>(bytes[i]) / 255.0f) << i;
}

TEST(Idx, EncodeReproducesReferenceBytes) {
    auto ds = scan::load_idx(kData / "idx_small" / "train-images-idx3-ubyte",
                             kData / "idx_small" / "train-labels-idx1-ubyte");
    const auto [img, lab] = scan::encode_idx(ds);
    EXPECT_EQ(img, scan::read_bytes(kData / "idx_small" / "train-images-idx3-ubyte"));
    EXPECT_EQ(lab, scan::read_bytes(kData / "idx_small" / "train-labels-idx1-ubyte"));
}

TEST(Idx, TenThousandItemPair) {
    TempDir tmp;
    auto ds = scan::synth::generate("shapes", 10000, 3);
    const auto [img, lab] = scan::encode_idx(ds);
    write_file(tmp.path / "img", img);
    write_file(tmp.path / "lab", lab);
    auto back = scan::load_idx(tmp.path / "img", tmp.path / "lab", 10, scan::Split::Test);
    EXPECT_EQ(back.size(), 10000u);
    EXPECT_EQ(back.template batch<float>(std::vector<std::size_t>{0, 1}).shape(), (scan::Shape{2, 1, 28, 28}));
    EXPECT_EQ(back.pixels.size(), 10000u * 28 * 28);
    EXPECT_EQ(back.labels, ds.labels);
}

TEST(Idx, TruncatedFileNamesByteCounts) {
    TempDir tmp;
    std::string img = scan::read_bytes(kData / "idx_small" / "train-images-idx3-ubyte");
    img.resize(img.size() - 4);
    write_file(tmp.path / "img", img);
    try {
        scan::load_idx(tmp.path / "img", kData / "idx_small" / "train-labels-idx1-ubyte");
        FAIL() << "expected a parse error";
    } catch (const scan::ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("34"), std::string::npos) << msg;  // expected 16 + 3*2*3 bytes
        EXPECT_NE(msg.find("30"), std::string::npos) << msg;  // found
    }
}

TEST(Idx, BadMagic) {
    TempDir tmp;
    std::string lab = scan::read_bytes(kData / "idx_small" / "train-labels-idx1-ubyte");
    lab[3] = 0x03;
    write_file(tmp.path / "lab", lab);
    EXPECT_THROW(scan::load_idx(kData / "idx_small" / "train-images-idx3-ubyte", tmp.path / "lab"), scan::ParseError);
    // Swapped files: the image magic is not a label magic.
    EXPECT_THROW(scan::load_idx(kData / "idx_small" / "train-labels-idx1-ubyte",
                                kData / "idx_small" / "train-images-idx3-ubyte"),
                 scan::ParseError);
}

TEST(Idx, CountMismatch) {
    TempDir tmp;
    std::string lab = scan::read_bytes(kData / "idx_small" / "train-labels-idx1-ubyte");
    lab[7] = 0x02;
    lab.pop_back();
    write_file(tmp.path / "lab", lab);
    EXPECT_THROW(scan::load_idx(kData / "idx_small" / "train-images-idx3-ubyte", tmp.path / "lab"), scan::ParseError);
}

TEST(Idx, LabelOutOfRange) {
    EXPECT_THROW(scan::load_idx(kData / "idx_small" / "train-images-idx3-ubyte",
                                kData / "idx_small" / "train-labels-idx1-ubyte", 5),
                 scan::ParseError);
}

TEST(Csv, ParsesHeaderAndRows) {
    TempDir tmp;
    {
        std::ofstream(tmp.path / "d.csv") << "label,p0,p1,p2,p3\n1,0,255,51,102\n0,255,0,0,0\n";
    }
    auto ds = scan::load_csv(tmp.path / "d.csv", 1, 2, 2, 2);
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{1, 0}));
    EXPECT_FLOAT_EQ(ds.pixels[1], 1.0f);
    EXPECT_FLOAT_EQ(ds.pixels[2], 0.2f);
    EXPECT_FLOAT_EQ(ds.pixels[4], 1.0f);
}

TEST(Csv, WrongFieldCountAndBadValues) {
    TempDir tmp;
    {
        std::ofstream(tmp.path / "a.csv") << "label,p0,p1\n1,0\n";
        std::ofstream(tmp.path / "b.csv") << "label,p0\n1,300\n";
        std::ofstream(tmp.path / "c.csv") << "label,p0\n1,abc\n";
    }
    EXPECT_THROW(scan::load_csv(tmp.path / "a.csv", 1, 1, 2, 2), scan::ParseError);
    EXPECT_THROW(scan::load_csv(tmp.path / "b.csv", 1, 1, 1, 2), scan::ParseError);
    EXPECT_THROW(scan::load_csv(tmp.path / "c.csv", 1, 1, 1, 2), scan::ParseError);
}

TEST(Normalization, StandardizesPerChannel) {
    auto ds = scan::synth::generate("rings", 200, 1);
    const auto norm = scan::compute_normalization(ds);
    scan::standardize(ds, norm);
    double s = 0, sq = 0;
    for (float v : ds.pixels) {
        s += v;
        sq += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(ds.pixels.size());
    EXPECT_NEAR(s / n, 0.0, 1e-5);
    EXPECT_NEAR(sq / n - (s / n) * (s / n), 1.0, 1e-4);
    EXPECT_THROW(scan::standardize(ds, norm), scan::ContractError);
}

TEST(Synthetic, DeterministicAndValid) {
    for (const char* name : {"blobs", "rings", "shapes"}) {
        auto a = scan::synth::generate(name, 64, 9), b = scan::synth::generate(name, 64, 9);
        EXPECT_EQ(a.pixels, b.pixels) << name;
        EXPECT_EQ(a.labels, b.labels) << name;
        EXPECT_NO_THROW(a.validate());
        for (float v : a.pixels) {
            ASSERT_GE(v, 0.f);
            ASSERT_LE(v, 1.f);
        }
    }
    EXPECT_THROW(scan::synth::generate("moons", 4, 1), scan::ConfigError);
}

TEST(Augment, DisabledIsIdentity) {
    auto ds = scan::synth::generate("shapes", 4, 2);
    auto x = ds.batch<float>(std::vector<std::size_t>{0, 1, 2, 3});
    scan::Rng rng(1);
    scan::AugmentConfig cfg;
    cfg.enabled = false;
    auto y = scan::augment(x, cfg, rng);
    EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Augment, FlipTwiceWithSameCropRestoresOriginal) {
    const std::size_t H = 5, W = 7;
    std::vector<float> src(H * W), once(H * W), twice(H * W), plain(H * W);
    for (std::size_t i = 0; i < src.size(); ++i) src[i] = static_cast<float>(i);
    scan::crop_flip_plane(src.data(), plain.data(), H, W, 2, -3, false);
    scan::crop_flip_plane(src.data(), once.data(), H, W, 2, -3, true);
    scan::crop_flip_plane(once.data(), twice.data(), H, W, 0, 0, true);
    EXPECT_EQ(twice, plain);
    scan::crop_flip_plane(src.data(), plain.data(), H, W, 0, 0, false);
    EXPECT_EQ(plain, src);
}

TEST(Augment, SameSeedSameBatch) {
    auto ds = scan::synth::generate("shapes", 8, 3);
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
    auto x = ds.batch<float>(idx);
    scan::Rng r1(42), r2(42), r3(43);
    auto a = scan::augment(x, scan::AugmentConfig{}, r1);
    auto b = scan::augment(x, scan::AugmentConfig{}, r2);
    auto c = scan::augment(x, scan::AugmentConfig{}, r3);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(Augment, ReflectIndexing) {
    EXPECT_EQ(scan::detail::reflect(-1, 5), 1u);
    EXPECT_EQ(scan::detail::reflect(-4, 5), 4u);
    EXPECT_EQ(scan::detail::reflect(5, 5), 3u);
    EXPECT_EQ(scan::detail::reflect(2, 5), 2u);
}

TEST(Dataset, SliceKeepsAlignment) {
    auto ds = scan::synth::generate("blobs", 10, 4);
    auto s = ds.slice(7, 3, scan::Split::Val);
    EXPECT_EQ(s.split, scan::Split::Val);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s.labels[0], ds.labels[7]);
    EXPECT_EQ(s.image(2)[5], ds.image(9)[5]);
    EXPECT_THROW(ds.slice(8, 3, scan::Split::Val), scan::ContractError);
}
