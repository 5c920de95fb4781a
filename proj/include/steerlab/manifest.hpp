#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/util.hpp"

namespace steerlab {

#ifndef STEERLAB_VERSION
#define STEERLAB_VERSION "0.0.0"
#endif

inline constexpr const char* tool_version = STEERLAB_VERSION;

struct OutputFile {
    std::string path;  ///< relative to the run directory
    std::string sha256;
};

struct StageRecord {
    std::vector<OutputFile> outputs;
    nlohmann::json config = nlohmann::json::object();
    std::string finished_at;
};

/// Stage outputs with content hashes, config snapshots and seeds for one run directory.
class RunManifest {
public:
    static constexpr const char* file_name = "manifest.json";

    explicit RunManifest(std::filesystem::path dir) : dir_(std::move(dir)) {}

    /// Reads `<dir>/manifest.json` when present, otherwise starts empty.
    static RunManifest open(const std::filesystem::path& dir) {
        RunManifest m(dir);
        const auto p = dir / file_name;
        if (!std::filesystem::exists(p)) {
            return m;
        }
        try {
            const auto j = nlohmann::json::parse(read_file(p.string()));
            m.seeds_ = j.value("seeds", nlohmann::json::object());
            m.created_at_ = j.value("created_at", "");
            for (const auto& [name, s] : j.at("stages").items()) {
                StageRecord r;
                r.config = s.value("config", nlohmann::json::object());
                r.finished_at = s.value("finished_at", "");
                for (const auto& o : s.at("outputs")) {
                    r.outputs.push_back({o.at("path").get<std::string>(), o.at("sha256").get<std::string>()});
                }
                m.stages_[name] = std::move(r);
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::FormatError, p.string() + ": " + e.what());
        }
        return m;
    }

    const std::filesystem::path& dir() const { return dir_; }

    void set_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }

    bool has_stage(const std::string& name) const { return stages_.count(name) != 0; }

    const StageRecord& stage(const std::string& name) const {
        const auto it = stages_.find(name);
        if (it == stages_.end()) {
            fail(ErrorCode::DependencyError, "stage '" + name + "' has not been run in " + dir_.string());
        }
        return it->second;
    }

    /// Hashes the given outputs (paths relative to the run directory) and records the stage.
    void record(const std::string& name, const std::vector<std::string>& outputs, nlohmann::json config,
                const std::string& finished_at) {
        StageRecord r;
        r.config = std::move(config);
        r.finished_at = finished_at;
        for (const auto& rel : outputs) {
            r.outputs.push_back({rel, file_sha256((dir_ / rel).string())});
        }
        stages_[name] = std::move(r);
    }

    /// Files whose current hash differs from the recorded one, or that are missing.
    std::vector<std::string> verify() const {
        std::vector<std::string> bad;
        for (const auto& [name, s] : stages_) {
            for (const auto& o : s.outputs) {
                const auto p = dir_ / o.path;
                if (!std::filesystem::exists(p) || file_sha256(p.string()) != o.sha256) {
                    bad.push_back(o.path);
                }
            }
        }
        return bad;
    }

    /// Fails with DependencyError unless `name` ran and its outputs are intact.
    void require_stage(const std::string& name) const {
        const auto& s = stage(name);
        for (const auto& o : s.outputs) {
            const auto p = dir_ / o.path;
            if (!std::filesystem::exists(p)) {
                fail(ErrorCode::DependencyError, "output " + o.path + " of stage '" + name + "' is missing");
            }
            if (file_sha256(p.string()) != o.sha256) {
                fail(ErrorCode::DependencyError, "output " + o.path + " of stage '" + name + "' was modified");
            }
        }
    }

    nlohmann::json to_json(const std::string& now) const {
        nlohmann::json j;
        j["tool_version"] = tool_version;
        j["created_at"] = created_at_.empty() ? now : created_at_;
        j["updated_at"] = now;
        j["seeds"] = seeds_;
        j["stages"] = nlohmann::json::object();
        for (const auto& [name, s] : stages_) {
            nlohmann::json o = nlohmann::json::array();
            for (const auto& f : s.outputs) {
                o.push_back({{"path", f.path}, {"sha256", f.sha256}});
            }
            j["stages"][name] = {{"outputs", o}, {"config", s.config}, {"finished_at", s.finished_at}};
        }
        return j;
    }

    void save(const std::string& now) {
        if (created_at_.empty()) {
            created_at_ = now;
        }
        write_file((dir_ / file_name).string(), to_json(now).dump(2) + "\n");
    }

private:
    std::filesystem::path dir_;
    std::string created_at_;
    nlohmann::json seeds_ = nlohmann::json::object();
    std::map<std::string, StageRecord> stages_;
};

/// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".steerlab.lock") {
        std::filesystem::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            fail(ErrorCode::IoError, "run directory " + dir.string() + " is locked by another process (" +
                                         path_.string() + ")");
        }
        const auto pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd_, pid.data(), pid.size());
    }

    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

} // namespace steerlab
