#ifndef INFERLET_H
#define INFERLET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define IK_OK 0

#define IK_ERR_INVALID_ARGUMENT -1

#define IK_ERR_INVALID_HANDLE -2

#define IK_ERR_DOUBLE_FREE -3

#define IK_ERR_INVALID_QUEUE -4

#define IK_ERR_UNKNOWN_MODEL -5

#define IK_ERR_POOL_EXHAUSTED -6

#define IK_ERR_IMMUTABLE_TARGET -7

#define IK_ERR_RANGE_MISMATCH -8

#define IK_ERR_LENGTH_MISMATCH -9

#define IK_ERR_NAME_TAKEN -10

#define IK_ERR_NAME_NOT_FOUND -11

#define IK_ERR_UNKNOWN_TOKEN_ID -12

#define IK_ERR_UNFILLED_EMBED -13

#define IK_ERR_SLOT_OVERFLOW -14

#define IK_ERR_MASK_SHAPE_MISMATCH -15

#define IK_ERR_POSITION_ORDER -16

#define IK_ERR_MISSING_TRAIT -17

#define IK_ERR_CLIENT_GONE -18

#define IK_ERR_DENIED -19

#define IK_ERR_NETWORK -20

#define IK_ERR_TIMEOUT -21

#define IK_ERR_TERMINATED -22

#define IK_ERR_BUSY -23

#define IK_ERR_BACKEND -24

#define IK_ERR_BUFFER_TOO_SMALL -25

#define IK_ERR_UNKNOWN_PROGRAM -26

#define IK_ERR_LOAD_FAILURE -27

#define IK_ERR_NOT_FOUND -28

#define IK_ERR_INTERNAL -99

#define IK_STATE_RUNNING 0

#define IK_STATE_FINISHED 1

#define IK_STATE_FAILED 2

#define IK_STATE_TERMINATED 3

/**
 * Length of a program hash written by `ik_upload`, without the NUL.
 */
#define IK_HASH_LEN 64

/**
 * Opaque kernel handle.
 */
typedef struct IkKernel IkKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a kernel. `config_toml` may be NULL for defaults; otherwise it
 * uses the server config keys (`kv_pages`, `models`, `policy`, ...).
 *
 * # Safety
 * `config_toml` must be NULL or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
int32_t ik_kernel_new(const char *config_toml, struct IkKernel **out);

/**
 * Frees a kernel and everything it runs. NULL is ignored.
 *
 * # Safety
 * `k` must be NULL or a handle from `ik_kernel_new` not yet freed.
 */
void ik_kernel_free(struct IkKernel *k);

/**
 * Stores a module and writes its NUL-terminated hex hash into `hash_out`,
 * which needs room for `IK_HASH_LEN + 1` bytes.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `hash_out` to `cap`
 * writable bytes.
 */
int32_t ik_upload(struct IkKernel *k, const uint8_t *data, size_t len, char *hash_out, size_t cap);

/**
 * Launches `program` (built-in name or hash) with `argc` arguments.
 *
 * # Safety
 * `program` and each of the `argc` entries of `argv` must be
 * NUL-terminated strings; `out` must be valid.
 */
int32_t ik_launch(struct IkKernel *k,
                  const char *program,
                  const char *const *argv,
                  size_t argc,
                  uint64_t *out);

/**
 * Delivers a client message to the instance's `receive`.
 *
 * # Safety
 * `data` must point to `len` readable bytes.
 */
int32_t ik_send(struct IkKernel *k, uint64_t instance, const uint8_t *data, size_t len);

/**
 * Runs until no instance can make progress without outside input.
 *
 * # Safety
 * `k` must be a live handle.
 */
int32_t ik_run_until_idle(struct IkKernel *k);

/**
 * Writes one of the `IK_STATE_*` values.
 *
 * # Safety
 * `state` must be valid.
 */
int32_t ik_status(struct IkKernel *k, uint64_t instance, int32_t *state);

/**
 * Takes the bytes the instance has sent so far. `*len` receives the
 * number of bytes available; if that exceeds `cap` the call fails with
 * `IK_ERR_BUFFER_TOO_SMALL` and nothing is consumed.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (may be NULL when `cap` is 0);
 * `len` must be valid.
 */
int32_t ik_read_output(struct IkKernel *k,
                       uint64_t instance,
                       uint8_t *buf,
                       size_t cap,
                       size_t *len);

/**
 * Terminates a running instance. Terminating an instance that already
 * exited succeeds and changes nothing.
 *
 * # Safety
 * `k` must be a live handle.
 */
int32_t ik_terminate(struct IkKernel *k, uint64_t instance);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `cap`. Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be NULL.
 */
size_t ik_last_error(char *buf, size_t cap);

/**
 * Static name of an error code, e.g. "PoolExhausted". Unknown codes give
 * "Unknown".
 */
const char *ik_error_name(int32_t code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFERLET_H */
