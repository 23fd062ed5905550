/*
 * Native core for pageguard.
 *
 * Three pieces live here because they must run without the GIL:
 *   - the page registry read path, which is consulted from the SIGSEGV handler;
 *   - the SIGSEGV handler itself plus mprotect wrappers;
 *   - the simulated DMA engine (progress thread, inboxes, loopback framing).
 *
 * The module is loaded twice: as a (nearly empty) CPython extension so that
 * setuptools builds and installs it, and through ctypes for the actual API.
 */

#include <Python.h>

#include <errno.h>
#include <poll.h>
#include <pthread.h>
#include <sched.h>
#include <signal.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/socket.h>
#include <time.h>
#include <unistd.h>

#define LOAD(p) __atomic_load_n((p), __ATOMIC_ACQUIRE)
#define LOAD_RELAXED(p) __atomic_load_n((p), __ATOMIC_RELAXED)
#define STORE(p, v) __atomic_store_n((p), (v), __ATOMIC_RELEASE)
#define STORE_RELAXED(p, v) __atomic_store_n((p), (v), __ATOMIC_RELAXED)
#define ADD(p, v) __atomic_add_fetch((p), (v), __ATOMIC_SEQ_CST)

#if defined(__x86_64__) || defined(__i386__)
#define cpu_relax() __builtin_ia32_pause()
#else
#define cpu_relax() __asm__ __volatile__("" ::: "memory")
#endif

static uint64_t now_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
}

uint64_t pg_now_ns(void) { return now_ns(); }

#define FNV_OFFSET 0xcbf29ce484222325ull
#define FNV_PRIME 0x100000001b3ull

static uint64_t fnv_update(uint64_t h, const unsigned char *p, uint64_t n) {
    for (uint64_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= FNV_PRIME;
    }
    return h;
}

uint64_t pg_fnv1a64(const void *p, uint64_t n) {
    return fnv_update(FNV_OFFSET, (const unsigned char *)p, n);
}

static void spin_lock(int *l) {
    unsigned n = 0;
    while (__atomic_exchange_n(l, 1, __ATOMIC_ACQUIRE)) {
        while (LOAD_RELAXED(l)) {
            if (++n > 128)
                sched_yield();
            else
                cpu_relax();
        }
    }
}

static void spin_unlock(int *l) { __atomic_store_n(l, 0, __ATOMIC_RELEASE); }

/*
 * Every native structure lives on pages of its own. User buffers that get
 * write-protected are page-granular too, so a protected page can never hold
 * engine or registry state that the progress thread or the handler writes.
 */
#define ALLOC_HDR 16

static void *pg_alloc(size_t n) {
    size_t total = n + ALLOC_HDR;
    void *p = mmap(NULL, total, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) return NULL;
    *(size_t *)p = total;
    return (char *)p + ALLOC_HDR;
}

static void pg_free(void *q) {
    if (!q) return;
    char *p = (char *)q - ALLOC_HDR;
    munmap(p, *(size_t *)p);
}

/* ------------------------------------------------------------------------ */
/* Region registry                                                          */
/* ------------------------------------------------------------------------ */

#define EMPTY_KEY UINT64_MAX

enum { SLOT_FREE = 0, SLOT_LIVE = 1 };

typedef struct {
    uint64_t key;  /* page index, EMPTY_KEY if never used */
    int32_t count; /* 0 means tombstone */
    int32_t pad;
} pg_page;

typedef struct {
    uint32_t ver; /* seqlock: odd while being rewritten */
    uint32_t state;
    uint64_t id;
    uint64_t seq;
    uint64_t range_start, range_len;
    uint64_t buf_start, buf_len;
    uint64_t *flag;
    uint64_t gen;
    uint32_t needs_release;
    uint32_t pad;
} pg_slot;

typedef struct pg_registry {
    uint64_t page_size;
    uint32_t page_shift;
    uint32_t cap;
    pg_slot *slots;
    uint32_t high_water; /* slots[0, high_water) may be live */
    uint32_t live;
    uint64_t next_seq;

    uint32_t tbits;
    uint64_t tcap;
    pg_page *tables[2];
    int cur;
    uint64_t used[2];  /* non-empty keys per table */
    uint64_t live_pages;
    int readers[2];

    int lock;
} pg_registry;

static inline int flag_done(const uint64_t *flag, uint64_t gen) {
    return LOAD(flag) >= gen;
}

static inline uint64_t hash_page(uint64_t pidx, uint32_t tbits) {
    return (pidx * 0x9E3779B97F4A7C15ull) >> (64 - tbits);
}

pg_registry *pg_reg_new(uint64_t page_size, uint32_t cap, uint64_t page_slots) {
    if (page_size < 4096 || (page_size & (page_size - 1)) || cap == 0)
        return NULL;
    uint32_t tbits = 4;
    while ((1ull << tbits) < page_slots * 2) tbits++;
    pg_registry *r = pg_alloc(sizeof(*r));
    if (!r) return NULL;
    r->page_size = page_size;
    r->page_shift = (uint32_t)__builtin_ctzll(page_size);
    r->cap = cap;
    r->slots = pg_alloc(cap * sizeof(pg_slot));
    r->tbits = tbits;
    r->tcap = 1ull << tbits;
    r->tables[0] = pg_alloc(r->tcap * sizeof(pg_page));
    r->tables[1] = pg_alloc(r->tcap * sizeof(pg_page));
    if (!r->slots || !r->tables[0] || !r->tables[1]) {
        pg_free(r->slots);
        pg_free(r->tables[0]);
        pg_free(r->tables[1]);
        pg_free(r);
        return NULL;
    }
    for (uint64_t i = 0; i < r->tcap; i++) {
        r->tables[0][i].key = EMPTY_KEY;
        r->tables[0][i].count = 0;
        r->tables[1][i].key = EMPTY_KEY;
        r->tables[1][i].count = 0;
    }
    return r;
}

void pg_reg_free(pg_registry *r) {
    if (!r) return;
    pg_free(r->slots);
    pg_free(r->tables[0]);
    pg_free(r->tables[1]);
    pg_free(r);
}

static int reader_enter(pg_registry *r) {
    for (;;) {
        int c = __atomic_load_n(&r->cur, __ATOMIC_SEQ_CST);
        ADD(&r->readers[c], 1);
        if (__atomic_load_n(&r->cur, __ATOMIC_SEQ_CST) == c) return c;
        ADD(&r->readers[c], -1);
    }
}

static void reader_exit(pg_registry *r, int c) { ADD(&r->readers[c], -1); }

/* Lock-free: safe from the fault handler. */
static int32_t page_count(pg_registry *r, uint64_t pidx) {
    int c = reader_enter(r);
    pg_page *t = r->tables[c];
    uint64_t mask = r->tcap - 1;
    int32_t count = 0;
    for (uint64_t i = hash_page(pidx, r->tbits), n = 0; n < r->tcap; i = (i + 1) & mask, n++) {
        uint64_t k = LOAD(&t[i].key);
        if (k == EMPTY_KEY) break;
        if (k == pidx) {
            count = LOAD(&t[i].count);
            break;
        }
    }
    reader_exit(r, c);
    return count;
}

/* Mutators below run with r->lock held. */
static pg_page *table_find(pg_page *t, pg_registry *r, uint64_t pidx, int insert) {
    uint64_t mask = r->tcap - 1;
    pg_page *reuse = NULL;
    for (uint64_t i = hash_page(pidx, r->tbits), n = 0; n < r->tcap; i = (i + 1) & mask, n++) {
        uint64_t k = t[i].key;
        if (k == pidx) return &t[i];
        if (k == EMPTY_KEY) {
            if (!insert) return NULL;
            if (reuse) return reuse;
            return &t[i];
        }
        if (insert && !reuse && t[i].count == 0) reuse = &t[i];
    }
    return insert ? reuse : NULL;
}

static void rebuild(pg_registry *r) {
    int old = r->cur, nxt = 1 - r->cur;
    while (__atomic_load_n(&r->readers[nxt], __ATOMIC_SEQ_CST)) sched_yield();
    pg_page *src = r->tables[old], *dst = r->tables[nxt];
    for (uint64_t i = 0; i < r->tcap; i++) {
        dst[i].count = 0;
        STORE(&dst[i].key, EMPTY_KEY);
    }
    uint64_t used = 0;
    for (uint64_t i = 0; i < r->tcap; i++) {
        if (src[i].key != EMPTY_KEY && src[i].count > 0) {
            pg_page *p = table_find(dst, r, src[i].key, 1);
            p->count = src[i].count;
            p->key = src[i].key;
            used++;
        }
    }
    r->used[nxt] = used;
    __atomic_store_n(&r->cur, nxt, __ATOMIC_SEQ_CST);
}

static int page_incr(pg_registry *r, uint64_t pidx) {
    pg_page *t = r->tables[r->cur];
    pg_page *p = table_find(t, r, pidx, 1);
    if (!p) return -ENOSPC;
    if (p->key != pidx) {
        if (p->key == EMPTY_KEY) r->used[r->cur]++;
        STORE(&p->count, 0);
        STORE(&p->key, pidx);
    }
    int32_t c = p->count;
    if (c == 0) r->live_pages++;
    STORE(&p->count, c + 1);
    return 0;
}

/* Returns the new count, or -1 if the page was absent. */
static int32_t page_decr(pg_registry *r, uint64_t pidx) {
    pg_page *p = table_find(r->tables[r->cur], r, pidx, 0);
    if (!p || p->count <= 0) return -1;
    int32_t c = p->count - 1;
    STORE(&p->count, c);
    if (c == 0) r->live_pages--;
    return c;
}

static void slot_write_begin(pg_slot *s) {
    STORE_RELAXED(&s->ver, s->ver + 1);
    __atomic_thread_fence(__ATOMIC_RELEASE);
}

static void slot_write_end(pg_slot *s) { STORE(&s->ver, s->ver + 1); }

static int64_t reg_register_locked(pg_registry *r, uint64_t id, uint64_t rs, uint64_t rl,
                                   uint64_t bs, uint64_t bl, uint64_t *flag, uint64_t gen) {
    uint64_t ps = r->page_size;
    if (rl == 0 || rs % ps || rl % ps || rs + rl < rs || !flag) return -EINVAL;
    if (bl && (bs < rs || bs + bl > rs + rl)) return -EINVAL;
    uint64_t npages = rl >> r->page_shift;
    if (r->live_pages + npages > r->tcap / 2) return -ENOSPC;
    if (r->used[r->cur] + npages > r->tcap / 2) {
        rebuild(r);
        if (r->used[r->cur] + npages > r->tcap / 2) return -ENOSPC;
    }
    int64_t idx = -1;
    for (uint32_t i = 0; i < r->cap; i++) {
        if (r->slots[i].state == SLOT_FREE) {
            idx = i;
            break;
        }
    }
    if (idx < 0) return -ENOSPC;

    pg_slot *s = &r->slots[idx];
    slot_write_begin(s);
    s->id = id;
    s->seq = r->next_seq++;
    s->range_start = rs;
    s->range_len = rl;
    s->buf_start = bs;
    s->buf_len = bl;
    s->flag = flag;
    s->gen = gen;
    s->needs_release = 0;
    s->state = SLOT_LIVE;
    slot_write_end(s);
    if ((uint32_t)idx >= r->high_water) STORE(&r->high_water, (uint32_t)idx + 1);
    r->live++;

    uint64_t first = rs >> r->page_shift;
    for (uint64_t p = first; p < first + npages; p++) page_incr(r, p);
    return idx;
}

static int64_t reg_remove_locked(pg_registry *r, int32_t slot, uint64_t id, int require_done,
                                 uint64_t *out, uint64_t max) {
    if (slot < 0 || (uint32_t)slot >= r->cap) return -ENOENT;
    pg_slot *s = &r->slots[slot];
    if (s->state != SLOT_LIVE || s->id != id) return -ENOENT;
    if (require_done && !flag_done(s->flag, s->gen)) return -EBUSY;
    uint64_t first = s->range_start >> r->page_shift;
    uint64_t npages = s->range_len >> r->page_shift;
    slot_write_begin(s);
    s->state = SLOT_FREE;
    slot_write_end(s);
    r->live--;
    int64_t nz = 0;
    for (uint64_t p = first; p < first + npages; p++) {
        if (page_decr(r, p) == 0) {
            if (out && (uint64_t)nz < max) out[nz] = p << r->page_shift;
            nz++;
        }
    }
    return nz;
}

int64_t pg_reg_register(pg_registry *r, uint64_t id, uint64_t rs, uint64_t rl, uint64_t bs,
                        uint64_t bl, uint64_t *flag, uint64_t gen) {
    spin_lock(&r->lock);
    int64_t rc = reg_register_locked(r, id, rs, rl, bs, bl, flag, gen);
    spin_unlock(&r->lock);
    return rc;
}

int64_t pg_reg_release(pg_registry *r, int32_t slot, uint64_t id, uint64_t *out, uint64_t max) {
    spin_lock(&r->lock);
    int64_t rc = reg_remove_locked(r, slot, id, 1, out, max);
    spin_unlock(&r->lock);
    return rc;
}

typedef struct {
    int32_t slot;
    uint64_t id;
    uint64_t range_start, range_len;
    uint64_t *flag;
    uint64_t gen;
    int in_buffer; /* addr inside some live op's buffer extent */
} pg_hit;

static int read_slot(pg_slot *s, pg_slot *copy) {
    for (int tries = 0; tries < 64; tries++) {
        uint32_t v1 = LOAD(&s->ver);
        if (v1 & 1) {
            cpu_relax();
            continue;
        }
        copy->state = LOAD_RELAXED(&s->state);
        copy->id = LOAD_RELAXED(&s->id);
        copy->seq = LOAD_RELAXED(&s->seq);
        copy->range_start = LOAD_RELAXED(&s->range_start);
        copy->range_len = LOAD_RELAXED(&s->range_len);
        copy->buf_start = LOAD_RELAXED(&s->buf_start);
        copy->buf_len = LOAD_RELAXED(&s->buf_len);
        copy->flag = LOAD_RELAXED(&s->flag);
        copy->gen = LOAD_RELAXED(&s->gen);
        __atomic_thread_fence(__ATOMIC_ACQUIRE);
        if (LOAD_RELAXED(&s->ver) == v1) return 1;
    }
    return 0;
}

/*
 * Find the earliest-registered live (registered, not completed) op whose range
 * covers addr. No allocation, no locks: callable from the fault handler.
 */
static int reg_lookup_live(pg_registry *r, uint64_t addr, pg_hit *hit) {
    if (page_count(r, addr >> r->page_shift) <= 0) return 0;
    uint32_t hw = LOAD(&r->high_water);
    uint64_t best_seq = UINT64_MAX;
    int found = 0;
    hit->in_buffer = 0;
    for (uint32_t i = 0; i < hw; i++) {
        pg_slot c;
        if (!read_slot(&r->slots[i], &c) || c.state != SLOT_LIVE) continue;
        if (addr < c.range_start || addr - c.range_start >= c.range_len) continue;
        if (flag_done(c.flag, c.gen)) continue;
        if (addr >= c.buf_start && addr - c.buf_start < c.buf_len) hit->in_buffer = 1;
        if (c.seq < best_seq) {
            best_seq = c.seq;
            hit->slot = (int32_t)i;
            hit->id = c.id;
            hit->range_start = c.range_start;
            hit->range_len = c.range_len;
            hit->flag = c.flag;
            hit->gen = c.gen;
            found = 1;
        }
    }
    return found;
}

int pg_reg_lookup(pg_registry *r, uint64_t addr, uint64_t *out_id, int32_t *out_slot) {
    pg_hit h;
    if (!reg_lookup_live(r, addr, &h)) return 0;
    *out_id = h.id;
    *out_slot = h.slot;
    return 1;
}

int32_t pg_reg_refcount(pg_registry *r, uint64_t addr) {
    return page_count(r, addr >> r->page_shift);
}

int64_t pg_reg_pages(pg_registry *r, uint64_t *out, uint64_t max) {
    spin_lock(&r->lock);
    pg_page *t = r->tables[r->cur];
    int64_t n = 0;
    for (uint64_t i = 0; i < r->tcap; i++) {
        if (t[i].key != EMPTY_KEY && t[i].count > 0) {
            if (out && (uint64_t)n < max) out[n] = t[i].key << r->page_shift;
            n++;
        }
    }
    spin_unlock(&r->lock);
    return n;
}

uint32_t pg_reg_live(pg_registry *r) { return LOAD_RELAXED(&r->live); }

int pg_reg_needs_release(pg_registry *r, int32_t slot, uint64_t id) {
    if (slot < 0 || (uint32_t)slot >= r->cap) return 0;
    pg_slot *s = &r->slots[slot];
    return LOAD(&s->state) == SLOT_LIVE && LOAD(&s->id) == id && LOAD(&s->needs_release);
}

/* ------------------------------------------------------------------------ */
/* Memory guard                                                             */
/* ------------------------------------------------------------------------ */

enum { STAT_PROTECTS, STAT_UNPROTECTS, STAT_FAULTS_GUARDED, STAT_FAULTS_FP, STAT_BLOCK_NS,
       STAT_FAULTS_UNRELATED, STAT_FAULTS_STALE, STAT_N };

static uint64_t g_stats[STAT_N];
static pg_registry *g_bound;
static struct sigaction g_prev;
static int g_installed;
static uint32_t g_spin = 64;
static uint64_t g_watchdog_ns;

#define EVENT_RING 4096
enum { KIND_GUARDED = 1, KIND_UNRELATED = 2 };

typedef struct {
    uint64_t addr;
    uint64_t wait_ns;
    uint64_t op_id;
    int32_t kind;
    int32_t false_positive;
} pg_event;

static pg_event g_events[EVENT_RING];
static uint64_t g_event_head;

static __thread uint64_t tls_miss_addr __attribute__((tls_model("initial-exec")));
static __thread uint32_t tls_miss_count __attribute__((tls_model("initial-exec")));

static void record_event(uint64_t addr, int kind, uint64_t wait_ns, uint64_t op_id, int fp) {
    uint64_t i = ADD(&g_event_head, 1) - 1;
    pg_event *e = &g_events[i % EVENT_RING];
    e->addr = addr;
    e->wait_ns = wait_ns;
    e->op_id = op_id;
    e->kind = kind;
    e->false_positive = fp;
}

uint64_t pg_guard_events(pg_event *out, uint64_t since, uint64_t max) {
    uint64_t head = LOAD(&g_event_head);
    if (head > EVENT_RING && since < head - EVENT_RING) since = head - EVENT_RING;
    uint64_t n = 0;
    for (uint64_t i = since; i < head && n < max; i++, n++) out[n] = g_events[i % EVENT_RING];
    return head;
}

void pg_guard_stats(uint64_t *out) {
    for (int i = 0; i < STAT_N; i++) out[i] = LOAD(&g_stats[i]);
}

void pg_guard_config(uint32_t spin, uint64_t watchdog_ns) {
    STORE(&g_spin, spin);
    STORE(&g_watchdog_ns, watchdog_ns);
}

int pg_protect(uint64_t addr, uint64_t len) {
    if (mprotect((void *)addr, len, PROT_READ)) return -errno;
    ADD(&g_stats[STAT_PROTECTS], 1);
    return 0;
}

int pg_unprotect(uint64_t addr, uint64_t len) {
    if (mprotect((void *)addr, len, PROT_READ | PROT_WRITE)) return -errno;
    ADD(&g_stats[STAT_UNPROTECTS], 1);
    return 0;
}

static void unprotect_runs(pg_registry *r, const uint64_t *pages, int64_t n) {
    int64_t i = 0;
    while (i < n) {
        uint64_t start = pages[i], end = start + r->page_size;
        int64_t j = i + 1;
        while (j < n && pages[j] == end) {
            end += r->page_size;
            j++;
        }
        pg_unprotect(start, end - start);
        i = j;
    }
}

int64_t pg_guard_register_protect(pg_registry *r, uint64_t id, uint64_t rs, uint64_t rl,
                                  uint64_t bs, uint64_t bl, uint64_t *flag, uint64_t gen) {
    spin_lock(&r->lock);
    int64_t slot = reg_register_locked(r, id, rs, rl, bs, bl, flag, gen);
    if (slot >= 0) {
        int rc = pg_protect(rs, rl);
        if (rc) {
            reg_remove_locked(r, (int32_t)slot, id, 0, NULL, 0);
            slot = rc;
        }
    }
    spin_unlock(&r->lock);
    return slot;
}

/* Release bookkeeping for a completed op and unprotect pages whose count hit 0. */
int64_t pg_guard_release(pg_registry *r, int32_t slot, uint64_t id, uint64_t *scratch,
                         uint64_t max) {
    spin_lock(&r->lock);
    int64_t n = reg_remove_locked(r, slot, id, 1, scratch, max);
    if (n > 0) unprotect_runs(r, scratch, n < (int64_t)max ? n : (int64_t)max);
    spin_unlock(&r->lock);
    return n;
}

/*
 * Called with r->lock held from the fault handler after the op it waited on
 * completed: restore write access to every page of [start, start+len) that is
 * ours (count >= 1) and not covered by any still-live op.
 */
#define MAX_OVERLAP 64

static void handler_unprotect(pg_registry *r, uint64_t start, uint64_t len, uint64_t fault_page) {
    uint64_t ov_start[MAX_OVERLAP], ov_end[MAX_OVERLAP];
    int nov = 0, overflow = 0;
    uint64_t end = start + len;
    uint32_t hw = r->high_water;
    for (uint32_t i = 0; i < hw; i++) {
        pg_slot *s = &r->slots[i];
        if (s->state != SLOT_LIVE) continue;
        uint64_t se = s->range_start + s->range_len;
        if (se <= start || s->range_start >= end) continue;
        if (flag_done(s->flag, s->gen)) {
            STORE(&s->needs_release, 1);
            continue;
        }
        if (nov == MAX_OVERLAP) {
            overflow = 1;
            break;
        }
        ov_start[nov] = s->range_start;
        ov_end[nov] = se;
        nov++;
    }
    if (overflow) {
        start = fault_page;
        end = fault_page + r->page_size;
    }
    uint64_t run = 0, run_len = 0;
    for (uint64_t p = start; p < end; p += r->page_size) {
        int covered = page_count(r, p >> r->page_shift) <= 0;
        for (int k = 0; !covered && k < nov; k++)
            if (p >= ov_start[k] && p < ov_end[k]) covered = 1;
        if (overflow && !covered) {
            /* recheck the single page against every slot */
            for (uint32_t i = 0; i < hw && !covered; i++) {
                pg_slot *s = &r->slots[i];
                if (s->state == SLOT_LIVE && p >= s->range_start &&
                    p - s->range_start < s->range_len && !flag_done(s->flag, s->gen))
                    covered = 1;
            }
        }
        if (!covered) {
            if (run_len && run + run_len == p) {
                run_len += r->page_size;
            } else {
                if (run_len) pg_unprotect(run, run_len);
                run = p;
                run_len = r->page_size;
            }
        }
    }
    if (run_len) pg_unprotect(run, run_len);
}

static void wait_done(uint64_t *flag, uint64_t gen, uint64_t t0) {
    uint32_t spins = LOAD_RELAXED(&g_spin);
    uint64_t wd = LOAD_RELAXED(&g_watchdog_ns);
    uint32_t i = 0;
    while (!flag_done(flag, gen)) {
        if (i < spins) {
            cpu_relax();
            i++;
            continue;
        }
        sched_yield();
        if (wd && now_ns() - t0 > wd) {
            static const char msg[] =
                "pageguard: watchdog expired waiting for a guarded send to complete\n";
            ssize_t ignored = write(2, msg, sizeof(msg) - 1);
            (void)ignored;
            abort();
        }
    }
}

static void passthrough(uint64_t addr) {
    ADD(&g_stats[STAT_FAULTS_UNRELATED], 1);
    record_event(addr, KIND_UNRELATED, 0, 0, 0);
    /* Re-arm whatever was there before us (normally SIG_DFL); the faulting
     * instruction re-executes and the original disposition applies. */
    sigaction(SIGSEGV, &g_prev, NULL);
}

static void on_segv(int sig, siginfo_t *si, void *uctx) {
    (void)sig;
    (void)uctx;
    int saved_errno = errno;
    uint64_t addr = (uint64_t)(uintptr_t)si->si_addr;
    pg_registry *r = LOAD(&g_bound);
    if (!r || si->si_code != SEGV_ACCERR) {
        passthrough(addr);
        errno = saved_errno;
        return;
    }
    uint64_t t0 = now_ns();
    uint64_t fault_page = addr & ~(r->page_size - 1);
    pg_hit hit;
    if (reg_lookup_live(r, addr, &hit)) {
        wait_done(hit.flag, hit.gen, t0);
        spin_lock(&r->lock);
        handler_unprotect(r, hit.range_start, hit.range_len, fault_page);
        spin_unlock(&r->lock);
        uint64_t waited = now_ns() - t0;
        int fp = !hit.in_buffer;
        ADD(&g_stats[STAT_FAULTS_GUARDED], 1);
        if (fp) ADD(&g_stats[STAT_FAULTS_FP], 1);
        ADD(&g_stats[STAT_BLOCK_NS], waited);
        record_event(addr, KIND_GUARDED, waited, hit.id, fp);
        tls_miss_count = 0;
        errno = saved_errno;
        return;
    }
    if (page_count(r, addr >> r->page_shift) > 0) {
        /* Our page, but every op on it already completed: finish the unprotect. */
        spin_lock(&r->lock);
        handler_unprotect(r, fault_page, r->page_size, fault_page);
        spin_unlock(&r->lock);
        ADD(&g_stats[STAT_FAULTS_STALE], 1);
        tls_miss_count = 0;
        errno = saved_errno;
        return;
    }
    /* Not ours right now. The page may have been released between the fault
     * and the lookup, so retry a couple of times before giving up on it. */
    if (tls_miss_addr == addr) {
        if (++tls_miss_count >= 3) {
            tls_miss_count = 0;
            passthrough(addr);
        }
    } else {
        tls_miss_addr = addr;
        tls_miss_count = 1;
    }
    errno = saved_errno;
}

int pg_guard_install(void) {
    struct sigaction cur;
    if (sigaction(SIGSEGV, NULL, &cur)) return -errno;
    if ((cur.sa_flags & SA_SIGINFO) && cur.sa_sigaction == on_segv) return 0;
    struct sigaction sa;
    memset(&sa, 0, sizeof(sa));
    sa.sa_sigaction = on_segv;
    sa.sa_flags = SA_SIGINFO | SA_RESTART;
    sigemptyset(&sa.sa_mask);
    if (sigaction(SIGSEGV, &sa, &g_prev)) return -errno;
    g_installed = 1;
    return 1;
}

int pg_guard_is_installed(void) {
    struct sigaction cur;
    if (sigaction(SIGSEGV, NULL, &cur)) return 0;
    return (cur.sa_flags & SA_SIGINFO) && cur.sa_sigaction == on_segv;
}

void pg_guard_bind(pg_registry *r) { STORE(&g_bound, r); }

/* ------------------------------------------------------------------------ */
/* Simulated DMA engine                                                     */
/* ------------------------------------------------------------------------ */

typedef struct pg_msg {
    struct pg_msg *next;
    int32_t src, tag;
    uint64_t len;
    unsigned char data[];
} pg_msg;

typedef struct {
    pthread_mutex_t mu;
    pthread_cond_t cv;
    pg_msg *head, *tail;
} pg_inbox;

enum { X_FREE, X_PREPARED, X_QUEUED, X_DONE };

typedef struct {
    uint64_t gen;
    uint64_t done_gen; /* published completion: done iff done_gen >= gen */
    int state;
    int orphan;
    int checksum;
    int32_t src, dst, tag;
    int32_t link_next; /* next xfer queued on the same (src, dst) link */
    const unsigned char *buf;
    uint64_t len, pos;
    uint64_t snapshot, observed;
    uint64_t t_start, t_begin, t_last_read, t_complete;
    pg_msg *msg;
} pg_xfer;

typedef struct {
    int32_t head, tail;
} pg_link;

typedef struct pg_engine {
    int world;
    uint64_t chunk, delay_ns, tick_ns;
    uint32_t cap;
    pg_xfer *x;
    pg_inbox *inbox;
    pg_link *links; /* world * world */
    int *link_fd;   /* loopback: send socket per (src, dst), -1 if none */
    int loopback;
    int checksum; /* 0 skips snapshot/observed FNV work */

    pthread_mutex_t mu;
    pthread_cond_t cv;
    int shutdown;
    int closed;
    uint32_t nqueued;
    pthread_t progress;

    int rfd[64];
    int rdst[64];
    int nr;
    int wake[2];
    pthread_t reader;
    int reader_running;
} pg_engine;

static void *progress_main(void *arg);
static void *reader_main(void *arg);

pg_engine *pg_engine_new(int world, uint64_t chunk, uint64_t delay_ns, uint64_t tick_ns,
                         uint32_t cap, int loopback) {
    if (world <= 0 || chunk == 0 || cap == 0) return NULL;
    pg_engine *e = pg_alloc(sizeof(*e));
    if (!e) return NULL;
    e->world = world;
    e->chunk = chunk;
    e->delay_ns = delay_ns;
    e->tick_ns = tick_ns ? tick_ns : 50000;
    e->cap = cap;
    e->loopback = loopback;
    e->checksum = 1;
    e->x = pg_alloc(cap * sizeof(pg_xfer));
    e->inbox = pg_alloc((size_t)world * sizeof(pg_inbox));
    e->links = pg_alloc((size_t)world * world * sizeof(pg_link));
    e->link_fd = pg_alloc(sizeof(int) * (size_t)world * world);
    if (!e->x || !e->inbox || !e->links || !e->link_fd) {
        pg_free(e->x);
        pg_free(e->inbox);
        pg_free(e->links);
        pg_free(e->link_fd);
        pg_free(e);
        return NULL;
    }
    for (int i = 0; i < world * world; i++) {
        e->links[i].head = e->links[i].tail = -1;
        e->link_fd[i] = -1;
    }
    for (int i = 0; i < world; i++) {
        pthread_mutex_init(&e->inbox[i].mu, NULL);
        pthread_cond_init(&e->inbox[i].cv, NULL);
    }
    pthread_mutex_init(&e->mu, NULL);
    pthread_cond_init(&e->cv, NULL);
    e->wake[0] = e->wake[1] = -1;
    if (pthread_create(&e->progress, NULL, progress_main, e)) {
        pg_free(e->x);
        pg_free(e->inbox);
        pg_free(e->links);
        pg_free(e->link_fd);
        pg_free(e);
        return NULL;
    }
    return e;
}

void pg_engine_set_checksum(pg_engine *e, int on) { e->checksum = on; }

int pg_engine_set_link(pg_engine *e, int src, int dst, int fd) {
    if (src < 0 || src >= e->world || dst < 0 || dst >= e->world) return -EINVAL;
    pthread_mutex_lock(&e->mu);
    e->link_fd[src * e->world + dst] = fd;
    pthread_mutex_unlock(&e->mu);
    return 0;
}

int pg_engine_add_recv(pg_engine *e, int fd, int dst) {
    if (dst < 0 || dst >= e->world) return -EINVAL;
    if (e->reader_running || e->nr >= 64) return -EBUSY;
    e->rfd[e->nr] = fd;
    e->rdst[e->nr] = dst;
    e->nr++;
    return 0;
}

int pg_engine_start_reader(pg_engine *e) {
    if (e->reader_running) return 0;
    if (pipe(e->wake)) return -errno;
    if (pthread_create(&e->reader, NULL, reader_main, e)) return -EAGAIN;
    e->reader_running = 1;
    return 0;
}

static void inbox_push(pg_engine *e, int dst, pg_msg *m) {
    pg_inbox *ib = &e->inbox[dst];
    m->next = NULL;
    pthread_mutex_lock(&ib->mu);
    if (ib->tail)
        ib->tail->next = m;
    else
        ib->head = m;
    ib->tail = m;
    pthread_cond_broadcast(&ib->cv);
    pthread_mutex_unlock(&ib->mu);
}

static int write_all(int fd, const void *p, size_t n) {
    const unsigned char *c = p;
    while (n) {
        ssize_t w = send(fd, c, n, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR) continue;
            return -errno;
        }
        c += w;
        n -= (size_t)w;
    }
    return 0;
}

static int read_all(int fd, void *p, size_t n) {
    unsigned char *c = p;
    while (n) {
        ssize_t r = read(fd, c, n);
        if (r < 0) {
            if (errno == EINTR) continue;
            return -errno;
        }
        if (r == 0) return -EPIPE;
        c += r;
        n -= (size_t)r;
    }
    return 0;
}

static void put_le(unsigned char *p, uint64_t v, int n) {
    for (int i = 0; i < n; i++) p[i] = (unsigned char)(v >> (8 * i));
}

static uint64_t get_le(const unsigned char *p, int n) {
    uint64_t v = 0;
    for (int i = 0; i < n; i++) v |= (uint64_t)p[i] << (8 * i);
    return v;
}

/* Frame: 8-byte LE payload length, 4-byte LE tag, 4-byte LE source rank, payload. */
static void deliver(pg_engine *e, pg_xfer *x) {
    pg_msg *m = x->msg;
    x->msg = NULL;
    if (e->loopback) {
        int fd = e->link_fd[x->src * e->world + x->dst];
        unsigned char hdr[16];
        put_le(hdr, m->len, 8);
        put_le(hdr + 8, (uint32_t)m->tag, 4);
        put_le(hdr + 12, (uint32_t)m->src, 4);
        if (fd >= 0) {
            write_all(fd, hdr, sizeof(hdr));
            write_all(fd, m->data, m->len);
        }
        pg_free(m);
    } else {
        inbox_push(e, x->dst, m);
    }
}

static void read_progress(pg_xfer *x, uint64_t upto) {
    if (upto <= x->pos) return;
    uint64_t n = upto - x->pos;
    memcpy(x->msg->data + x->pos, x->buf + x->pos, n);
    if (x->checksum) x->observed = fnv_update(x->observed, x->msg->data + x->pos, n);
    STORE_RELAXED(&x->pos, upto);
    x->t_last_read = now_ns();
}

/* Bytes a transfer should have read by time t under the chunk-per-step rate. */
static uint64_t target_bytes(pg_engine *e, pg_xfer *x, uint64_t t) {
    if (e->delay_ns == 0) return x->len;
    uint64_t el = t - x->t_begin;
    unsigned __int128 b = (unsigned __int128)el * e->chunk / e->delay_ns;
    return b >= x->len ? x->len : (uint64_t)b;
}

static uint64_t eta_ns(pg_engine *e, pg_xfer *x) {
    unsigned __int128 t = (unsigned __int128)x->len * e->delay_ns;
    t = (t + e->chunk - 1) / e->chunk;
    return x->t_begin + (uint64_t)t;
}

static void free_xfer(pg_xfer *x) {
    pg_free(x->msg);
    x->msg = NULL;
    x->state = X_FREE;
    x->orphan = 0;
}

static void *progress_main(void *arg) {
    pg_engine *e = arg;
    int W = e->world;
    int32_t *done = pg_alloc(sizeof(int32_t) * e->cap);
    pthread_mutex_lock(&e->mu);
    for (;;) {
        while (e->nqueued == 0 && !e->shutdown) pthread_cond_wait(&e->cv, &e->mu);
        if (e->nqueued == 0 && e->shutdown) break;
        uint64_t t = now_ns();
        uint64_t wake = UINT64_MAX;
        int ndone = 0;
        for (int l = 0; l < W * W; l++) {
            int32_t h = e->links[l].head;
            if (h < 0) continue;
            pg_xfer *x = &e->x[h];
            if (x->t_begin == 0) x->t_begin = t;
            read_progress(x, target_bytes(e, x, t));
            if (x->pos == x->len) {
                e->links[l].head = x->link_next;
                if (e->links[l].head < 0) e->links[l].tail = -1;
                else wake = 0; /* the next transfer on this link starts now */
                done[ndone++] = h;
            } else {
                uint64_t eta = eta_ns(e, x);
                uint64_t nxt = t + e->tick_ns;
                if (eta < nxt) nxt = eta;
                if (nxt < wake) wake = nxt;
            }
        }
        if (ndone) {
            pthread_mutex_unlock(&e->mu);
            for (int i = 0; i < ndone; i++) deliver(e, &e->x[done[i]]);
            pthread_mutex_lock(&e->mu);
            uint64_t tc = now_ns();
            for (int i = 0; i < ndone; i++) {
                pg_xfer *x = &e->x[done[i]];
                x->t_complete = tc;
                x->state = X_DONE;
                e->nqueued--;
                STORE(&x->done_gen, x->gen);
                if (x->orphan) free_xfer(x);
            }
            pthread_cond_broadcast(&e->cv);
            continue;
        }
        if (wake == UINT64_MAX || wake == 0) continue;
        uint64_t now = now_ns();
        if (wake > now) {
            uint64_t d = wake - now;
            struct timespec ts;
            clock_gettime(CLOCK_REALTIME, &ts);
            uint64_t ns = (uint64_t)ts.tv_nsec + d;
            ts.tv_sec += (time_t)(ns / 1000000000ull);
            ts.tv_nsec = (long)(ns % 1000000000ull);
            pthread_cond_timedwait(&e->cv, &e->mu, &ts);
        }
    }
    pthread_mutex_unlock(&e->mu);
    pg_free(done);
    return NULL;
}

static void *reader_main(void *arg) {
    pg_engine *e = arg;
    struct pollfd pfd[65];
    int alive[64];
    for (int i = 0; i < e->nr; i++) alive[i] = 1;
    for (;;) {
        int n = 0;
        int map[64];
        pfd[n].fd = e->wake[0];
        pfd[n].events = POLLIN;
        n++;
        for (int i = 0; i < e->nr; i++) {
            if (!alive[i]) continue;
            pfd[n].fd = e->rfd[i];
            pfd[n].events = POLLIN;
            map[n - 1] = i;
            n++;
        }
        int rc = poll(pfd, (nfds_t)n, -1);
        if (rc < 0) {
            if (errno == EINTR) continue;
            break;
        }
        if (pfd[0].revents) break;
        for (int k = 1; k < n; k++) {
            if (!pfd[k].revents) continue;
            int i = map[k - 1];
            unsigned char hdr[16];
            if (read_all(e->rfd[i], hdr, sizeof(hdr))) {
                alive[i] = 0;
                continue;
            }
            uint64_t len = get_le(hdr, 8);
            pg_msg *m = pg_alloc(sizeof(pg_msg) + len);
            if (!m) {
                alive[i] = 0;
                continue;
            }
            m->len = len;
            m->tag = (int32_t)get_le(hdr + 8, 4);
            m->src = (int32_t)get_le(hdr + 12, 4);
            if (len && read_all(e->rfd[i], m->data, len)) {
                pg_free(m);
                alive[i] = 0;
                continue;
            }
            inbox_push(e, e->rdst[i], m);
        }
    }
    return NULL;
}

static pg_xfer *xfer_get(pg_engine *e, int32_t slot, uint64_t gen) {
    if (slot < 0 || (uint32_t)slot >= e->cap) return NULL;
    pg_xfer *x = &e->x[slot];
    if (x->state == X_FREE || x->gen != gen) return NULL;
    return x;
}

int64_t pg_isend_prepare(pg_engine *e, int src, int dst, int tag, uint64_t addr, uint64_t len,
                         uint64_t *gen_out) {
    if (src < 0 || src >= e->world || dst < 0 || dst >= e->world) return -EINVAL;
    if (tag < 0) return -EDOM;
    pg_msg *m = pg_alloc(sizeof(pg_msg) + len);
    if (!m) return -ENOMEM;
    m->src = src;
    m->tag = tag;
    m->len = len;
    pthread_mutex_lock(&e->mu);
    if (e->shutdown || e->closed) {
        pthread_mutex_unlock(&e->mu);
        pg_free(m);
        return -ESHUTDOWN;
    }
    if (e->loopback && e->link_fd[src * e->world + dst] < 0) {
        pthread_mutex_unlock(&e->mu);
        pg_free(m);
        return -EINVAL;
    }
    int64_t slot = -1;
    for (uint32_t i = 0; i < e->cap; i++) {
        if (e->x[i].state == X_FREE) {
            slot = i;
            break;
        }
    }
    if (slot < 0) {
        pthread_mutex_unlock(&e->mu);
        pg_free(m);
        return -EAGAIN;
    }
    pg_xfer *x = &e->x[slot];
    x->gen++;
    x->state = X_PREPARED;
    x->orphan = 0;
    x->src = src;
    x->dst = dst;
    x->tag = tag;
    x->buf = (const unsigned char *)(uintptr_t)addr;
    x->len = len;
    x->pos = 0;
    x->snapshot = FNV_OFFSET;
    x->observed = FNV_OFFSET;
    x->t_start = x->t_begin = x->t_last_read = x->t_complete = 0;
    x->link_next = -1;
    x->msg = m;
    *gen_out = x->gen;
    pthread_mutex_unlock(&e->mu);
    return slot;
}

int pg_isend_start(pg_engine *e, int32_t slot, uint64_t gen) {
    pthread_mutex_lock(&e->mu);
    pg_xfer *x = xfer_get(e, slot, gen);
    if (!x || x->state != X_PREPARED) {
        pthread_mutex_unlock(&e->mu);
        return -ESTALE;
    }
    if (e->shutdown) {
        pthread_mutex_unlock(&e->mu);
        return -ESHUTDOWN;
    }
    x->checksum = e->checksum;
    if (x->checksum) x->snapshot = fnv_update(FNV_OFFSET, x->buf, x->len);
    x->t_start = now_ns();
    x->state = X_QUEUED;
    pg_link *l = &e->links[x->src * e->world + x->dst];
    if (l->tail >= 0)
        e->x[l->tail].link_next = slot;
    else
        l->head = slot;
    l->tail = slot;
    e->nqueued++;
    pthread_cond_broadcast(&e->cv);
    pthread_mutex_unlock(&e->mu);
    return 0;
}

/* Drop a handle. Prepared transfers are cancelled; in-flight ones finish first. */
int pg_xfer_drop(pg_engine *e, int32_t slot, uint64_t gen) {
    pthread_mutex_lock(&e->mu);
    pg_xfer *x = xfer_get(e, slot, gen);
    int rc = 0;
    if (!x)
        rc = -ESTALE;
    else if (x->state == X_QUEUED)
        x->orphan = 1;
    else {
        /* a cancelled transfer never touched its buffer: publish it as done */
        STORE(&x->done_gen, x->gen);
        free_xfer(x);
    }
    pthread_mutex_unlock(&e->mu);
    return rc;
}

int pg_test(pg_engine *e, int32_t slot, uint64_t gen) {
    if (slot < 0 || (uint32_t)slot >= e->cap) return -ESTALE;
    pg_xfer *x = &e->x[slot];
    pthread_mutex_lock(&e->mu);
    int ok = x->state != X_FREE && x->gen == gen;
    pthread_mutex_unlock(&e->mu);
    if (!ok) return -ESTALE;
    return flag_done(&x->done_gen, gen);
}

uint64_t *pg_flag_ptr(pg_engine *e, int32_t slot) {
    if (slot < 0 || (uint32_t)slot >= e->cap) return NULL;
    return &e->x[slot].done_gen;
}

uint64_t pg_bytes_sent(pg_engine *e, int32_t slot) {
    if (slot < 0 || (uint32_t)slot >= e->cap) return 0;
    return LOAD_RELAXED(&e->x[slot].pos);
}

/* out: snapshot, observed, t_start, t_last_read, t_complete, bytes */
int pg_report(pg_engine *e, int32_t slot, uint64_t gen, uint64_t *out) {
    pthread_mutex_lock(&e->mu);
    pg_xfer *x = xfer_get(e, slot, gen);
    int rc = 0;
    if (!x)
        rc = -ESTALE;
    else if (x->state != X_DONE)
        rc = -EAGAIN;
    else {
        out[0] = x->snapshot;
        out[1] = x->observed;
        out[2] = x->t_start;
        out[3] = x->t_last_read;
        out[4] = x->t_complete;
        out[5] = x->pos;
    }
    pthread_mutex_unlock(&e->mu);
    return rc;
}

static int matches(pg_msg *m, int src, int tag) {
    return (src < 0 || m->src == src) && (tag < 0 || m->tag == tag);
}

int pg_probe(pg_engine *e, int rank, int src, int tag, uint64_t *len_out) {
    if (rank < 0 || rank >= e->world) return -EINVAL;
    pg_inbox *ib = &e->inbox[rank];
    int found = 0;
    pthread_mutex_lock(&ib->mu);
    for (pg_msg *m = ib->head; m; m = m->next) {
        if (matches(m, src, tag)) {
            found = 1;
            if (len_out) *len_out = m->len;
            break;
        }
    }
    pthread_mutex_unlock(&ib->mu);
    return found;
}

/*
 * Returns the byte count, -ETIMEDOUT, -ESHUTDOWN, or -EMSGSIZE (with the
 * required size in *needed; the message stays queued).
 */
int64_t pg_recv(pg_engine *e, int rank, int src, int tag, void *out, uint64_t cap,
                int64_t timeout_ns, uint64_t *needed, int32_t *src_out, int32_t *tag_out) {
    if (rank < 0 || rank >= e->world) return -EINVAL;
    pg_inbox *ib = &e->inbox[rank];
    struct timespec dl;
    if (timeout_ns >= 0) {
        clock_gettime(CLOCK_REALTIME, &dl);
        uint64_t ns = (uint64_t)dl.tv_nsec + (uint64_t)timeout_ns;
        dl.tv_sec += (time_t)(ns / 1000000000ull);
        dl.tv_nsec = (long)(ns % 1000000000ull);
    }
    pthread_mutex_lock(&ib->mu);
    for (;;) {
        pg_msg *prev = NULL, *m = ib->head;
        while (m && !matches(m, src, tag)) {
            prev = m;
            m = m->next;
        }
        if (m) {
            if (m->len > cap) {
                *needed = m->len;
                pthread_mutex_unlock(&ib->mu);
                return -EMSGSIZE;
            }
            if (prev)
                prev->next = m->next;
            else
                ib->head = m->next;
            if (ib->tail == m) ib->tail = prev;
            pthread_mutex_unlock(&ib->mu);
            /* copy outside the lock: out may be a guarded page */
            if (m->len) memcpy(out, m->data, m->len);
            int64_t n = (int64_t)m->len;
            if (src_out) *src_out = m->src;
            if (tag_out) *tag_out = m->tag;
            pg_free(m);
            return n;
        }
        if (LOAD(&e->closed)) {
            pthread_mutex_unlock(&ib->mu);
            return -ESHUTDOWN;
        }
        if (timeout_ns == 0) {
            pthread_mutex_unlock(&ib->mu);
            return -ETIMEDOUT;
        }
        if (timeout_ns < 0) {
            pthread_cond_wait(&ib->cv, &ib->mu);
        } else if (pthread_cond_timedwait(&ib->cv, &ib->mu, &dl) == ETIMEDOUT) {
            pthread_mutex_unlock(&ib->mu);
            return -ETIMEDOUT;
        }
    }
}

uint32_t pg_engine_inflight(pg_engine *e) {
    pthread_mutex_lock(&e->mu);
    uint32_t n = e->nqueued;
    pthread_mutex_unlock(&e->mu);
    return n;
}

/* Stop accepting sends, let queued transfers finish, wake blocked receivers. */
void pg_engine_close(pg_engine *e) {
    pthread_mutex_lock(&e->mu);
    if (e->shutdown) {
        pthread_mutex_unlock(&e->mu);
        return;
    }
    e->shutdown = 1;
    pthread_cond_broadcast(&e->cv);
    pthread_mutex_unlock(&e->mu);
    pthread_join(e->progress, NULL);
    if (e->reader_running) {
        ssize_t ignored = write(e->wake[1], "x", 1);
        (void)ignored;
        pthread_join(e->reader, NULL);
        close(e->wake[0]);
        close(e->wake[1]);
        e->reader_running = 0;
    }
    STORE(&e->closed, 1);
    for (int i = 0; i < e->world; i++) {
        pthread_mutex_lock(&e->inbox[i].mu);
        pthread_cond_broadcast(&e->inbox[i].cv);
        pthread_mutex_unlock(&e->inbox[i].mu);
    }
}

void pg_engine_free(pg_engine *e) {
    if (!e) return;
    pg_engine_close(e);
    for (int i = 0; i < e->world; i++) {
        pg_msg *m = e->inbox[i].head;
        while (m) {
            pg_msg *n = m->next;
            pg_free(m);
            m = n;
        }
    }
    for (uint32_t i = 0; i < e->cap; i++) pg_free(e->x[i].msg);
    pg_free(e->x);
    pg_free(e->inbox);
    pg_free(e->links);
    pg_free(e->link_fd);
    pg_free(e);
}

/* ------------------------------------------------------------------------ */

static struct PyModuleDef native_module = {
    PyModuleDef_HEAD_INIT, "_native", "ctypes-loaded native core", -1, NULL, NULL, NULL, NULL, NULL,
};

PyMODINIT_FUNC PyInit__native(void) { return PyModule_Create(&native_module); }
