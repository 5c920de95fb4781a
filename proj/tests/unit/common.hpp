#pragma once

#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "steerlab/error.hpp"
#include "steerlab/model.hpp"
#include "steerlab/util.hpp"
#include "steerlab/vocab.hpp"

namespace steerlab::test {

#define EXPECT_STEERLAB_ERROR(stmt, expected_code)                                   \
    do {                                                                             \
        try {                                                                        \
            stmt;                                                                    \
            ADD_FAILURE() << "expected " << ::steerlab::to_string(expected_code);    \
        } catch (const ::steerlab::Error& e_) {                                      \
            EXPECT_EQ(e_.code(), expected_code) << e_.what();                        \
        }                                                                            \
    } while (0)

inline tinylm::ModelConfig small_config(int vocab = 12, int layers = 2, int d = 16) {
    tinylm::ModelConfig c;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = 2;
    c.d_ff = 2 * d;
    c.vocab_size = vocab;
    c.max_seq = 32;
    c.seed = 11;
    return c;
}

/// Init with a larger spread than training uses so outputs are far from uniform.
template <typename T = float>
tinylm::Weights<T> random_weights(const tinylm::ModelConfig& c, double sd = 0.3) {
    return tinylm::Weights<T>::init(c, sd);
}

inline std::vector<float> random_vec(std::mt19937_64& rng, std::size_t d, double scale = 1.0) {
    std::vector<float> v(d);
    for (auto& x : v) {
        x = static_cast<float>(scale * normal01(rng));
    }
    return v;
}

inline std::vector<float> random_unit(std::mt19937_64& rng, std::size_t d) {
    auto v = random_vec(rng, d);
    double n = 0.0;
    for (const float x : v) {
        n += static_cast<double>(x) * x;
    }
    n = std::sqrt(n);
    for (auto& x : v) {
        x = static_cast<float>(x / n);
    }
    return v;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("steerlab-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline std::string data_file(const std::string& name) { return std::string(STEERLAB_TEST_DATA) + "/" + name; }

} // namespace steerlab::test
