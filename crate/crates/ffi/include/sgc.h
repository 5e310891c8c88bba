#ifndef SGC_H
#define SGC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call.
 */
typedef enum SgcStatus {
  SGC_STATUS_OK = 0,
  SGC_STATUS_NULL_ARGUMENT = 1,
  SGC_STATUS_INVALID_UTF8 = 2,
  SGC_STATUS_INVALID_ARGUMENT = 3,
  /*
   Bytes are not a well-formed packet.
   */
  SGC_STATUS_DECODE = 4,
  /*
   Digest mismatch: the packet was modified.
   */
  SGC_STATUS_INTEGRITY = 5,
  /*
   Signature does not verify under the sender's certificate.
   */
  SGC_STATUS_AUTHENTICITY = 6,
  /*
   Key or certificate missing, unreadable or untrusted.
   */
  SGC_STATUS_KEY = 7,
  SGC_STATUS_PANIC = 8,
} SgcStatus;

/*
 Key directory plus an optional trust anchor.
 */
typedef struct SgcKeyStore SgcKeyStore;

/*
 Bytes owned by this library.
 */
typedef struct SgcBuffer {
  uint8_t *data;
  size_t len;
} SgcBuffer;

/*
 Topic metadata. String fields are NUL-terminated UTF-8; optional ones
 may be NULL. `cert_fingerprint` points to 32 bytes.
 */
typedef struct SgcTopicMetadata {
  const char *topic_name;
  const char *topic_type;
  const char *author;
  const char *maintainer;
  const char *description;
  const char *unique_suffix;
  const uint8_t *cert_fingerprint;
} SgcTopicMetadata;

/*
 Header fields of a validated packet.
 */
typedef struct SgcPacketInfo {
  uint8_t packet_type;
  uint8_t flags;
  uint8_t ttl;
  uint8_t source[32];
  uint8_t destination[32];
  uint64_t nonce;
  size_t payload_len;
} SgcPacketInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Description of the last failure on this thread, or NULL after a
 successful call. Valid until the next call on the same thread.
 */
const char *sgc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sgc_version(void);

/*
 Releases a buffer returned by this library. Safe to call on an empty buffer.

 # Safety
 `buf` must come from this library and not have been freed already.
 */
void sgc_buffer_free(struct SgcBuffer buf);

/*
 Derives the 32-byte name of a topic into `out`.

 # Safety
 `meta` must point to a valid `SgcTopicMetadata`; `out` to 32 writable bytes.
 */
enum SgcStatus sgc_derive_name(const struct SgcTopicMetadata *meta, uint8_t *out);

/*
 Writes the 64-character lowercase hex form of a name plus a NUL into `out`.

 # Safety
 `name` must point to 32 readable bytes; `out` to 65 writable bytes.
 */
enum SgcStatus sgc_name_to_hex(const uint8_t *name, char *out);

/*
 Opens a key directory holding `<id>.key.pem`, `<id>.cert.json` and
 `<id>.psk` files. When `anchor_id` is not NULL, sender certificates
 used by `sgc_open_packet` must be issued by that anchor.

 # Safety
 `dir` must be NUL-terminated, `anchor_id` NULL or NUL-terminated, `out` writable.
 */
enum SgcStatus sgc_keystore_open(const char *dir, const char *anchor_id, struct SgcKeyStore **out);

/*
 # Safety
 `ks` must be NULL or a handle from `sgc_keystore_open` not yet freed.
 */
void sgc_keystore_free(struct SgcKeyStore *ks);

/*
 Seals `payload` into an encoded Data packet addressed to `name`, signed
 by `identity` and encrypted with the pre-shared key `key_ref`.

 # Safety
 Pointers must be valid for the stated lengths; `name` is 32 bytes.
 */
enum SgcStatus sgc_seal_packet(const struct SgcKeyStore *ks,
                               const char *identity,
                               const char *key_ref,
                               const uint8_t *name,
                               uint8_t ttl,
                               const uint8_t *payload,
                               size_t payload_len,
                               struct SgcBuffer *out);

/*
 Decodes an encoded sealed packet, checks it against the certificate
 `sender` and returns the plaintext payload.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum SgcStatus sgc_open_packet(const struct SgcKeyStore *ks,
                               const char *sender,
                               const char *key_ref,
                               const uint8_t *wire,
                               size_t wire_len,
                               struct SgcBuffer *out);

/*
 Checks that `wire` is exactly one well-formed packet and reports its header.

 # Safety
 `wire` must be valid for `wire_len` bytes; `info` writable or NULL.
 */
enum SgcStatus sgc_packet_validate(const uint8_t *wire,
                                   size_t wire_len,
                                   struct SgcPacketInfo *info);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGC_H */
