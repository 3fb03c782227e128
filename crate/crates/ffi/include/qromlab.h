#ifndef QROMLAB_H
#define QROMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QromStatus {
  QROM_STATUS_OK = 0,
  QROM_STATUS_NULL_POINTER = 1,
  QROM_STATUS_INVALID_ARGUMENT = 2,
  QROM_STATUS_INVALID_CONFIG = 3,
  QROM_STATUS_UNSUPPORTED = 4,
  QROM_STATUS_RUNTIME = 5,
  QROM_STATUS_IO = 6,
  QROM_STATUS_PANIC = 7,
} QromStatus;

/**
 * Protocol handle.
 */
typedef struct QromProtocol QromProtocol;

/**
 * State on registers `x` and `y` with a purified oracle.
 */
typedef struct QromState QromState;

/**
 * Keys are 0, 1, or -1 for abort. Diagnostics are NaN when the learner aborted.
 */
typedef struct QromAttackOutcome {
  int32_t k_e;
  int32_t k_a;
  int32_t k_b;
  size_t l_size;
  bool aborted;
  bool conjecture_relevant;
  double eq_find;
  double eq_simulatedm;
  double eq_agrees;
} QromAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *qrom_last_error(void);

/**
 * Library version as a static string.
 */
const char *qrom_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void qrom_string_free(char *s);

/**
 * Builtin protocol `name` with domain size `n` over the group with the given
 * cyclic factors.
 *
 * # Safety
 * `name` is a nul-terminated string, `factors` points to `n_factors` values
 * and `out` is writable.
 */
enum QromStatus qrom_protocol_builtin(const char *name,
                                      size_t n,
                                      const size_t *factors,
                                      size_t n_factors,
                                      struct QromProtocol **out);

/**
 * Parses and validates a protocol JSON document.
 *
 * # Safety
 * `json` is a nul-terminated string and `out` is writable.
 */
enum QromStatus qrom_protocol_from_json(const char *json, struct QromProtocol **out);

/**
 * Protocol JSON; free with [`qrom_string_free`].
 *
 * # Safety
 * `p` is a live handle and `out` is writable.
 */
enum QromStatus qrom_protocol_to_json(const struct QromProtocol *p, char **out);

/**
 * Query budget `d` and whether the protocol is inside the attack's hypothesis.
 *
 * # Safety
 * `p` is a live handle; the out pointers are writable.
 */
enum QromStatus qrom_protocol_info(const struct QromProtocol *p,
                                   size_t *d,
                                   bool *alice_no_final_query);

/**
 * # Safety
 * `p` is null or a handle from this library that has not been freed.
 */
void qrom_protocol_free(struct QromProtocol *p);

/**
 * One attack trial against a uniformly random oracle. The oracle and all
 * randomness come from stream `trial` of a generator seeded with `seed`.
 *
 * # Safety
 * `p` is a live handle and `out` is writable.
 */
enum QromStatus qrom_attack_run(const struct QromProtocol *p,
                                double eps,
                                double lambda,
                                uint64_t seed,
                                uint64_t trial,
                                bool force_simulated_oracle,
                                struct QromAttackOutcome *out);

/**
 * Validates and runs an experiment config, writing its reports; the summary
 * JSON is returned in `out`. Invalid configs return `InvalidConfig`.
 *
 * # Safety
 * `config_json` is a nul-terminated string and `out` is writable.
 */
enum QromStatus qrom_experiment_run(const char *config_json, char **out);

/**
 * `|0⟩_x |0⟩_y` with a purified oracle `h: [n] → G`.
 *
 * # Safety
 * `factors` points to `n_factors` values and `out` is writable.
 */
enum QromStatus qrom_state_new(size_t n,
                               const size_t *factors,
                               size_t n_factors,
                               struct QromState **out);

/**
 * Fourier transform (or its inverse) on register `x` or `y`.
 *
 * # Safety
 * `s` is a live handle and `register` a nul-terminated string.
 */
enum QromStatus qrom_state_fourier(struct QromState *s, const char *register_, bool inverse);

/**
 * Adds `value` to register `x` or `y`.
 *
 * # Safety
 * `s` is a live handle and `register` a nul-terminated string.
 */
enum QromStatus qrom_state_add(struct QromState *s, const char *register_, size_t value);

/**
 * `|x⟩|y⟩ ↦ |x⟩|y ± h(x)⟩` against the purified oracle.
 *
 * # Safety
 * `s` is a live handle.
 */
enum QromStatus qrom_state_query(struct QromState *s, bool inverse);

/**
 * Probability that cell `x` is not `|0̂⟩`.
 *
 * # Safety
 * `s` is a live handle and `out` is writable.
 */
enum QromStatus qrom_state_weight(const struct QromState *s, size_t x, double *out);

/**
 * Largest number of non-zero Fourier characters in any component.
 *
 * # Safety
 * `s` is a live handle and `out` is writable.
 */
enum QromStatus qrom_state_sparsity(const struct QromState *s, size_t *out);

/**
 * # Safety
 * `s` is null or a handle from this library that has not been freed.
 */
void qrom_state_free(struct QromState *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QROMLAB_H */
