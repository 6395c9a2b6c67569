#include "fedrai/common.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

namespace fedrai {

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t master, std::string_view tag) {
    return mix64(master ^ mix64(fnv1a(tag)));
}

uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t a) {
    return mix64(derive_seed(master, tag) ^ mix64(a + 1));
}

uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t a, uint64_t b) {
    return mix64(derive_seed(master, tag, a) ^ mix64(b + 0x51ed2701));
}

namespace {

int thread_cap_from_env() {
    const char* env = std::getenv("FEDRAI_THREADS");
    if (!env || *env == '\0') {
        return 0;
    }
    int v = std::atoi(env);
    return v > 0 ? v : 1;
}

// Persistent pool; workers pull indices from a shared atomic counter. Each
// item is computed wholly inside one worker, so outputs are scheduling-free.
class Pool {
public:
    static Pool& instance() {
        static Pool pool;
        return pool;
    }

    void run(size_t n, const std::function<void(size_t)>& fn) {
        if (n == 0) {
            return;
        }
        const int workers = effective_threads(0);
        if (workers <= 1 || n == 1) {
            for (size_t i = 0; i < n; ++i) {
                fn(i);
            }
            return;
        }
        std::unique_lock<std::mutex> lock(job_mutex_);
        ensure_workers(workers - 1);
        {
            std::lock_guard<std::mutex> guard(mutex_);
            fn_ = &fn;
            total_ = n;
            next_.store(0, std::memory_order_relaxed);
            pending_ = static_cast<int>(threads_.size());
            error_ = nullptr;
            ++generation_;
        }
        cv_.notify_all();
        work();  // the caller participates
        {
            std::unique_lock<std::mutex> guard(mutex_);
            done_cv_.wait(guard, [&] { return pending_ == 0; });
            fn_ = nullptr;
            if (error_) {
                std::exception_ptr e = error_;
                error_ = nullptr;
                std::rethrow_exception(e);
            }
        }
    }

private:
    Pool() = default;

    ~Pool() {
        {
            std::lock_guard<std::mutex> guard(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) {
            t.join();
        }
    }

    void ensure_workers(int count) {
        while (static_cast<int>(threads_.size()) < count) {
            threads_.emplace_back([this, gen = generation_] { worker_loop(gen); });
        }
    }

    void work() {
        const size_t total = total_;
        while (true) {
            size_t i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= total) {
                break;
            }
            try {
                (*fn_)(i);
            } catch (...) {
                std::lock_guard<std::mutex> guard(mutex_);
                if (!error_) {
                    error_ = std::current_exception();
                }
            }
        }
    }

    void worker_loop(uint64_t seen) {
        while (true) {
            std::unique_lock<std::mutex> guard(mutex_);
            cv_.wait(guard, [&] { return stop_ || generation_ != seen; });
            if (stop_) {
                return;
            }
            seen = generation_;
            guard.unlock();
            work();
            guard.lock();
            if (--pending_ == 0) {
                done_cv_.notify_all();
            }
        }
    }

    std::mutex job_mutex_;  // serialises whole jobs (no nested parallelism)
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> threads_;
    std::exception_ptr error_ = nullptr;
    const std::function<void(size_t)>* fn_ = nullptr;
    std::atomic<size_t> next_{0};
    size_t total_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

int effective_threads(int requested) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) {
        hw = 1;
    }
    int n = requested > 0 ? requested : hw;
    int cap = thread_cap_from_env();
    if (cap > 0 && cap < n) {
        n = cap;
    }
    return n < 1 ? 1 : n;
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    Pool::instance().run(n, fn);
}

std::string fnv1a_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes)));
    return std::string(buf);
}

std::string checksum_file(const std::string& path) {
    return fnv1a_hex(read_text_file(path));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open file: " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file_atomic(const std::string& path, std::string_view content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
        fs::create_directories(target.parent_path());
    }
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write file: " + tmp.string());
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            throw IoError("short write: " + tmp.string());
        }
    }
    fs::rename(tmp, target);
}

}  // namespace fedrai
