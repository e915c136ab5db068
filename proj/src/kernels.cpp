#include "pqforge/kernels.hpp"

#include <cstdlib>
#include <string>

namespace pqforge::kernels {

const Table<float>& scalar_table_f32();
const Table<double>& scalar_table_f64();
#if defined(__x86_64__) || defined(_M_X64)
const Table<float>& avx2_table_f32();
const Table<double>& avx2_table_f64();
#endif

const char* backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

bool backend_supported(Backend b) {
    if (b == Backend::scalar) return true;
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

namespace {

Backend detect_backend() {
    if (const char* env = std::getenv("PQFORGE_KERNEL")) {
        std::string s(env);
        if (s == "scalar") return Backend::scalar;
        if (s == "avx2" && backend_supported(Backend::avx2)) return Backend::avx2;
    }
    return backend_supported(Backend::avx2) ? Backend::avx2 : Backend::scalar;
}

Backend& backend_slot() {
    static Backend b = detect_backend();
    return b;
}

} // namespace

Backend active_backend() { return backend_slot(); }

void set_backend(Backend b) {
    if (!backend_supported(b)) throw StateError(std::string("kernel backend not supported: ") + backend_name(b));
    backend_slot() = b;
}

template <>
const Table<float>& table_for<float>(Backend b) {
#if defined(__x86_64__) || defined(_M_X64)
    if (b == Backend::avx2) return avx2_table_f32();
#endif
    (void)b;
    return scalar_table_f32();
}

template <>
const Table<double>& table_for<double>(Backend b) {
#if defined(__x86_64__) || defined(_M_X64)
    if (b == Backend::avx2) return avx2_table_f64();
#endif
    (void)b;
    return scalar_table_f64();
}

} // namespace pqforge::kernels
