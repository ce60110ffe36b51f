#ifndef TENSORTEE_H
#define TENSORTEE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 2 to 4 match the command-line exit codes.
typedef enum TtStatus {
  TT_STATUS_OK = 0,
  TT_STATUS_INTERNAL = 1,
  TT_STATUS_CONFIG = 2,
  TT_STATUS_INTEGRITY = 3,
  TT_STATUS_ATTESTATION = 4,
  TT_STATUS_INVALID_ARGUMENT = 5,
  TT_STATUS_PANIC = 6,
} TtStatus;

typedef enum TtMode {
  TT_MODE_NON_SECURE = 0,
  TT_MODE_SGX_MGX = 1,
  TT_MODE_TENSOR_TEE = 2,
} TtMode;

typedef enum TtRegion {
  TT_REGION_DATA = 0,
  TT_REGION_VN = 1,
  TT_REGION_MAC = 2,
} TtRegion;

typedef enum TtCampaign {
  TT_CAMPAIGN_BITFLIP = 0,
  TT_CAMPAIGN_REPLAY = 1,
  TT_CAMPAIGN_ESCAPE = 2,
} TtCampaign;

// Opaque configuration handle.
typedef struct TtConfig TtConfig;

// Opaque CPU-side protected memory handle.
typedef struct TtCpu TtCpu;

typedef struct TtCampaignResult {
  uint64_t trials;
  uint64_t detected;
  uint64_t escaped_sends;
  uint64_t escaped_bytes;
} TtCampaignResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next failing
// call on the same thread.
const char *tt_last_error(void);

// Library version as a static NUL-terminated string.
const char *tt_version(void);

// # Safety
// `out` must be a valid pointer.
enum TtStatus tt_config_default(struct TtConfig **out);

// Parses a JSON configuration. Unset fields take defaults.
//
// # Safety
// `json` must be NUL-terminated; `out` must be a valid pointer.
enum TtStatus tt_config_from_json(const char *json, struct TtConfig **out);

// Sets a named knob, for example `mac_granularity` or `seed`.
//
// # Safety
// `cfg` must come from this library; strings must be NUL-terminated.
enum TtStatus tt_config_set(struct TtConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must come from this library or be null.
void tt_config_free(struct TtConfig *cfg);

// Creates protected memory of `n_lines` 64-byte lines starting at `base`.
//
// # Safety
// `cfg` must come from this library; `out` must be a valid pointer.
enum TtStatus tt_cpu_new(const struct TtConfig *cfg,
                         enum TtMode mode,
                         uint64_t base,
                         size_t n_lines,
                         struct TtCpu **out);

// # Safety
// `cpu` must come from this library or be null.
void tt_cpu_free(struct TtCpu *cpu);

// Writes one 64-byte line.
//
// # Safety
// `line` must point to 64 readable bytes.
enum TtStatus tt_cpu_write(struct TtCpu *cpu, uint64_t va, const uint8_t *line);

// Reads and verifies one 64-byte line into `out`.
//
// # Safety
// `out` must point to 64 writable bytes.
enum TtStatus tt_cpu_read(struct TtCpu *cpu, uint64_t va, uint8_t *out);

// Flips one stored bit of the line at `va` and drops cached metadata so the
// next read goes off chip. Fails in non-secure mode.
//
// # Safety
// `cpu` must come from this library.
enum TtStatus tt_cpu_flip_bit(struct TtCpu *cpu, enum TtRegion region, uint64_t va, uint32_t bit);

// Runs a randomized attack campaign.
//
// # Safety
// `cfg` must come from this library; `out` must be a valid pointer.
enum TtStatus tt_run_campaign(const struct TtConfig *cfg,
                              enum TtCampaign kind,
                              uint64_t trials,
                              uint64_t seed,
                              struct TtCampaignResult *out);

// Runs the configured workload under a comma-separated mode list and writes
// metrics into `out_dir`.
//
// # Safety
// `cfg` must come from this library; strings must be NUL-terminated.
enum TtStatus tt_run_experiment(const struct TtConfig *cfg, const char *modes, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TENSORTEE_H */
