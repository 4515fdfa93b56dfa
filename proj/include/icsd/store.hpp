#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include "icsd/errors.hpp"
#include "icsd/hash.hpp"
#include "icsd/jsonl.hpp"

namespace icsd::store {

namespace detail {

inline void fsync_fd(int fd) {
    if (fd >= 0) ::fsync(fd);
}

inline void fsync_dir(const std::filesystem::path& dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
}

// Test harness hook: ICSD_CRASH_AFTER_RECORDS="<stage>:<n>" kills the process
// (no cleanup, like a power cut) after the n-th durable append in that stage.
inline std::optional<std::size_t> crash_point_for(const std::string& stage) {
    const char* env = std::getenv("ICSD_CRASH_AFTER_RECORDS");
    if (!env || !*env) return std::nullopt;
    const std::string raw(env);
    const auto colon = raw.rfind(':');
    if (colon == std::string::npos || raw.substr(0, colon) != stage) return std::nullopt;
    return static_cast<std::size_t>(std::strtoull(raw.c_str() + colon + 1, nullptr, 10));
}

}  // namespace detail

// Append-only jsonl stage output with crash-safe commit:
//   <stage>.jsonl.part   in-progress records, fsynced every `fsync_every`
//   <stage>.jsonl        atomically renamed on commit
//   <stage>.done         marker with the input-content hash and record count
//
// Re-running a committed stage with the same input hash is a no-op (skip()).
// Re-running after a crash resumes: the torn tail of the .part file is
// truncated and the first `resumed()` append calls are swallowed, so callers
// simply replay their full deterministic record stream.
class StageWriter {
  public:
    StageWriter(std::filesystem::path dir, std::string stage, std::uint64_t input_hash,
                std::uint64_t config_hash = 0, std::size_t fsync_every = 64)
        : dir_(std::move(dir)),
          stage_(std::move(stage)),
          input_hash_(input_hash),
          config_hash_(config_hash),
          fsync_every_(fsync_every == 0 ? 1 : fsync_every),
          crash_at_(detail::crash_point_for(stage_)) {
        namespace fs = std::filesystem;
        fs::create_directories(dir_);
        final_path_ = dir_ / (stage_ + ".jsonl");
        part_path_ = dir_ / (stage_ + ".jsonl.part");
        marker_path_ = dir_ / (stage_ + ".done");

        if (auto marker = read_marker()) {
            if ((*marker)["input_hash"].get<std::string>() == to_hex(input_hash_) &&
                fs::exists(final_path_)) {
                completed_ = true;
                count_ = (*marker)["records"].get<std::size_t>();
                return;
            }
            // input changed since the checkpoint: archive and restart
            fs::remove(marker_path_);
            if (fs::exists(final_path_)) {
                fs::rename(final_path_,
                           dir_ / (stage_ + ".jsonl.stale-" + to_hex(input_hash_)));
            }
        }

        if (fs::exists(part_path_)) resume_from_part();
        file_ = std::fopen(part_path_.c_str(), "ab");
        if (!file_) throw DataError("cannot open " + part_path_.string());
    }

    StageWriter(const StageWriter&) = delete;
    StageWriter& operator=(const StageWriter&) = delete;

    ~StageWriter() {
        if (file_) std::fclose(file_);
    }

    bool skip() const { return completed_; }
    std::size_t resumed() const { return resumed_; }
    std::size_t count() const { return count_; }
    const std::filesystem::path& path() const { return final_path_; }

    void append(const Json& rec) {
        if (completed_) return;
        ++count_;
        if (count_ <= resumed_) return;  // already durable from the crashed run
        const std::string line = rec.dump() + "\n";
        if (std::fwrite(line.data(), 1, line.size(), file_) != line.size())
            throw DataError("write failed for " + part_path_.string());
        ++since_sync_;
        if (since_sync_ >= fsync_every_) {
            std::fflush(file_);
            detail::fsync_fd(::fileno(file_));
            since_sync_ = 0;
        }
        if (crash_at_ && count_ >= *crash_at_) {
            std::fflush(file_);
            detail::fsync_fd(::fileno(file_));
            std::_Exit(86);
        }
    }

    std::filesystem::path commit() {
        if (completed_) return final_path_;
        std::fflush(file_);
        detail::fsync_fd(::fileno(file_));
        std::fclose(file_);
        file_ = nullptr;
        std::filesystem::rename(part_path_, final_path_);
        detail::fsync_dir(dir_);
        Json marker;
        marker["stage"] = stage_;
        marker["input_hash"] = to_hex(input_hash_);
        marker["config_hash"] = to_hex(config_hash_);
        marker["records"] = count_;
        std::ofstream m(marker_path_, std::ios::binary | std::ios::trunc);
        m << marker.dump() << "\n";
        m.flush();
        detail::fsync_dir(dir_);
        completed_ = true;
        return final_path_;
    }

    // Drop all progress (part + marker), e.g. when the caller decides the
    // stage must be recomputed from scratch.
    void abandon() {
        if (file_) {
            std::fclose(file_);
            file_ = nullptr;
        }
        std::filesystem::remove(part_path_);
        std::filesystem::remove(marker_path_);
    }

  private:
    std::optional<Json> read_marker() const {
        std::ifstream in(marker_path_);
        if (!in) return std::nullopt;
        std::string line;
        std::getline(in, line);
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("input_hash") || !j.contains("records"))
            return std::nullopt;
        return j;
    }

    // Count intact records in the .part file and chop any torn tail.
    void resume_from_part() {
        std::ifstream in(part_path_, std::ios::binary);
        std::string line;
        std::uint64_t good_end = 0;
        std::size_t good = 0;
        while (std::getline(in, line)) {
            if (in.eof() && !line.empty()) break;  // no trailing newline: torn
            Json j = Json::parse(line, nullptr, false);
            if (j.is_discarded()) break;
            good_end += line.size() + 1;
            ++good;
        }
        in.close();
        std::filesystem::resize_file(part_path_, good_end);
        resumed_ = good;
        count_ = 0;
    }

    std::filesystem::path dir_, final_path_, part_path_, marker_path_;
    std::string stage_;
    std::uint64_t input_hash_;
    std::uint64_t config_hash_;
    std::size_t fsync_every_;
    std::optional<std::size_t> crash_at_;
    std::FILE* file_ = nullptr;
    bool completed_ = false;
    std::size_t count_ = 0;
    std::size_t resumed_ = 0;
    std::size_t since_sync_ = 0;
};

inline std::vector<Json> read_stage(const std::filesystem::path& dir, const std::string& stage) {
    std::vector<Json> out;
    for_each_jsonl_record(dir / (stage + ".jsonl"),
                          [&](std::size_t, const Json& rec) { out.push_back(rec); });
    return out;
}

inline bool stage_complete(const std::filesystem::path& dir, const std::string& stage,
                           std::uint64_t input_hash) {
    std::ifstream in(dir / (stage + ".done"));
    if (!in) return false;
    std::string line;
    std::getline(in, line);
    Json j = Json::parse(line, nullptr, false);
    return !j.is_discarded() && j.value("input_hash", "") == to_hex(input_hash) &&
           std::filesystem::exists(dir / (stage + ".jsonl"));
}

}  // namespace icsd::store
