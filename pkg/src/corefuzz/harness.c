/* Snapshot harness: executes driver commands received on stdin.
 *
 * Frames are [u32 LE length of type+payload][u8 type][payload].  Snapshot
 * code runs on this process's own thread; control comes back through the
 * trailing INT3 (SIGTRAP) or a fault signal, both caught on an alternate
 * signal stack and unwound with siglongjmp.
 */
#define _GNU_SOURCE
#include <errno.h>
#include <setjmp.h>
#include <signal.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/time.h>
#include <ucontext.h>
#include <unistd.h>

#ifndef MAP_FIXED_NOREPLACE
#define MAP_FIXED_NOREPLACE 0x100000
#endif

enum { C_MAP = 1, C_WRITE, C_PROTECT, C_EXEC, C_CHECKSUM, C_EXIT, C_READ };
enum { RSP_OK = 0x80, RSP_REGS, RSP_SUM, RSP_FAULT, RSP_DATA, RSP_ERR = 0xFF };
enum { E_BAD_COMMAND = 1, E_COLLISION, E_NOT_MAPPED, E_TIMEOUT, E_SIGNAL, E_BAD_ARGUMENT };

#define PAGE 4096ULL
#define MAX_MAPPINGS 64
/* Arithmetic flags plus DF, and the always-one bit 1. */
#define FLAGS_LOADABLE 0xCD7ULL

/* Register block in state order: rax rbx rcx rdx rsi rdi rbp rsp r8..r15 rip rflags. */
uint64_t g_regs[18];
static uint64_t g_out[18];
static uint64_t g_fault_addr;
static volatile sig_atomic_t g_sig;
static volatile sig_atomic_t g_running;
static sigjmp_buf g_env;

static struct { uint64_t start, len; } g_maps[MAX_MAPPINGS];
static int g_nmaps;

void enter_snapshot(void);
__asm__(
    ".text\n"
    ".globl enter_snapshot\n"
    "enter_snapshot:\n"
    "  pushq g_regs+136(%rip)\n"
    "  popfq\n"
    "  movq g_regs+0(%rip), %rax\n"
    "  movq g_regs+8(%rip), %rbx\n"
    "  movq g_regs+16(%rip), %rcx\n"
    "  movq g_regs+24(%rip), %rdx\n"
    "  movq g_regs+32(%rip), %rsi\n"
    "  movq g_regs+40(%rip), %rdi\n"
    "  movq g_regs+48(%rip), %rbp\n"
    "  movq g_regs+64(%rip), %r8\n"
    "  movq g_regs+72(%rip), %r9\n"
    "  movq g_regs+80(%rip), %r10\n"
    "  movq g_regs+88(%rip), %r11\n"
    "  movq g_regs+96(%rip), %r12\n"
    "  movq g_regs+104(%rip), %r13\n"
    "  movq g_regs+112(%rip), %r14\n"
    "  movq g_regs+120(%rip), %r15\n"
    "  movq g_regs+56(%rip), %rsp\n"
    "  jmp *g_regs+128(%rip)\n");

static void on_signal(int sig, siginfo_t *si, void *ctx) {
    if (!g_running) {
        signal(sig, SIG_DFL);
        raise(sig);
        return;
    }
    greg_t *g = ((ucontext_t *)ctx)->uc_mcontext.gregs;
    static const int order[18] = {REG_RAX, REG_RBX, REG_RCX, REG_RDX, REG_RSI, REG_RDI,
                                  REG_RBP, REG_RSP, REG_R8,  REG_R9,  REG_R10, REG_R11,
                                  REG_R12, REG_R13, REG_R14, REG_R15, REG_RIP, REG_EFL};
    for (int i = 0; i < 18; i++) g_out[i] = (uint64_t)g[order[i]];
    if (sig == SIGTRAP) {
        /* Report rip at the trap byte itself. */
        const unsigned char *p = (const unsigned char *)(g_out[16] - 1);
        if (*p == 0xCC) g_out[16] -= 1;
    }
    g_fault_addr = (sig == SIGSEGV || sig == SIGBUS) ? (uint64_t)si->si_addr : 0;
    g_sig = sig;
    g_running = 0;
    siglongjmp(g_env, 1);
}

static int read_full(void *buf, size_t n) {
    unsigned char *p = buf;
    while (n) {
        ssize_t r = read(0, p, n);
        if (r < 0 && errno == EINTR) continue;
        if (r <= 0) return -1;
        p += r;
        n -= (size_t)r;
    }
    return 0;
}

static void write_full(const void *buf, size_t n) {
    const unsigned char *p = buf;
    while (n) {
        ssize_t r = write(1, p, n);
        if (r < 0 && errno == EINTR) continue;
        if (r <= 0) _exit(3);
        p += r;
        n -= (size_t)r;
    }
}

static void respond(uint8_t type, const void *payload, uint32_t len) {
    unsigned char head[5];
    uint32_t total = len + 1;
    memcpy(head, &total, 4);
    head[4] = type;
    write_full(head, 5);
    if (len) write_full(payload, len);
}

static void respond_err(uint8_t code) { respond(RSP_ERR, &code, 1); }

static int covered(uint64_t start, uint64_t len) {
    /* Every page of [start, start+len) lies in some mapping. */
    for (uint64_t a = start; a < start + len; a += PAGE) {
        int ok = 0;
        for (int i = 0; i < g_nmaps && !ok; i++)
            ok = a >= g_maps[i].start && a < g_maps[i].start + g_maps[i].len;
        if (!ok) return 0;
    }
    return 1;
}

static int aligned(uint64_t start, uint64_t len) {
    return len > 0 && start % PAGE == 0 && len % PAGE == 0 && start + len > start;
}

static void do_exec(const unsigned char *p) {
    uint32_t limit_ms;
    memcpy(g_regs, p, sizeof g_regs);
    memcpy(&limit_ms, p + sizeof g_regs, 4);
    g_regs[17] = (g_regs[17] & FLAGS_LOADABLE) | 2;
    struct itimerval t = {{0, 0}, {limit_ms / 1000, (limit_ms % 1000) * 1000}};
    struct itimerval off = {{0, 0}, {0, 0}};
    g_sig = 0;
    if (sigsetjmp(g_env, 1) == 0) {
        setitimer(ITIMER_PROF, &t, NULL);
        g_running = 1;
        enter_snapshot();
    }
    setitimer(ITIMER_PROF, &off, NULL);
    if (g_sig == SIGPROF) {
        respond_err(E_TIMEOUT);
    } else if (g_sig == SIGTRAP) {
        respond(RSP_REGS, g_out, sizeof g_out);
    } else {
        unsigned char buf[1 + 8 + sizeof g_out];
        buf[0] = (unsigned char)g_sig;
        memcpy(buf + 1, &g_fault_addr, 8);
        memcpy(buf + 9, g_out, sizeof g_out);
        respond(RSP_FAULT, buf, sizeof buf);
    }
}

static void unmap_all(void) {
    for (int i = 0; i < g_nmaps; i++) munmap((void *)g_maps[i].start, g_maps[i].len);
    g_nmaps = 0;
}

int main(void) {
    static unsigned char altstack[1 << 16];
    stack_t ss = {.ss_sp = altstack, .ss_size = sizeof altstack, .ss_flags = 0};
    sigaltstack(&ss, NULL);
    struct sigaction sa;
    memset(&sa, 0, sizeof sa);
    sa.sa_sigaction = on_signal;
    sa.sa_flags = SA_SIGINFO | SA_ONSTACK | SA_NODEFER;
    sigemptyset(&sa.sa_mask);
    int sigs[] = {SIGSEGV, SIGBUS, SIGILL, SIGFPE, SIGTRAP, SIGPROF};
    for (size_t i = 0; i < sizeof sigs / sizeof *sigs; i++) sigaction(sigs[i], &sa, NULL);

    unsigned char *buf = NULL;
    size_t cap = 0;
    for (;;) {
        unsigned char head[5];
        if (read_full(head, 5)) return 0;
        uint32_t len;
        memcpy(&len, head, 4);
        if (len < 1) return 2;
        len -= 1;
        if (len > cap) {
            cap = len;
            buf = realloc(buf, cap);
            if (!buf) return 4;
        }
        if (read_full(buf, len)) return 2;
        uint64_t start = 0, n = 0;
        if (len >= 16) {
            memcpy(&start, buf, 8);
            memcpy(&n, buf + 8, 8);
        }
        switch (head[4]) {
        case C_MAP:
            if (len != 16 || !aligned(start, n) || g_nmaps == MAX_MAPPINGS) {
                respond_err(E_BAD_ARGUMENT);
                break;
            }
            {
                void *r = mmap((void *)start, n, PROT_READ | PROT_WRITE,
                               MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE, -1, 0);
                if (r == MAP_FAILED || (uint64_t)r != start) {
                    if (r != MAP_FAILED) munmap(r, n);
                    respond_err(E_COLLISION);
                    break;
                }
                g_maps[g_nmaps].start = start;
                g_maps[g_nmaps].len = n;
                g_nmaps++;
                respond(RSP_OK, NULL, 0);
            }
            break;
        case C_WRITE:
            if (len < 8) {
                respond_err(E_BAD_ARGUMENT);
                break;
            }
            memcpy(&start, buf, 8);
            if (!aligned(start, len - 8) || !covered(start, len - 8)) {
                respond_err(E_NOT_MAPPED);
                break;
            }
            memcpy((void *)start, buf + 8, len - 8);
            respond(RSP_OK, NULL, 0);
            break;
        case C_PROTECT:
            if (len != 17 || !aligned(start, n) || !covered(start, n)) {
                respond_err(E_NOT_MAPPED);
                break;
            }
            if (mprotect((void *)start, n, buf[16] & 7)) {
                respond_err(E_BAD_ARGUMENT);
                break;
            }
            respond(RSP_OK, NULL, 0);
            break;
        case C_EXEC:
            if (len != sizeof g_regs + 4) {
                respond_err(E_BAD_ARGUMENT);
                break;
            }
            do_exec(buf);
            break;
        case C_CHECKSUM:
        case C_READ:
            if (len != 16 || !aligned(start, n) || !covered(start, n)) {
                respond_err(E_NOT_MAPPED);
                break;
            }
            /* Pages may have lost read permission; restore it to look. */
            mprotect((void *)start, n, PROT_READ);
            if (head[4] == C_CHECKSUM) {
                uint64_t h = 0xcbf29ce484222325ULL;
                const unsigned char *m = (const unsigned char *)start;
                for (uint64_t i = 0; i < n; i++) h = (h ^ m[i]) * 0x100000001b3ULL;
                respond(RSP_SUM, &h, 8);
            } else {
                respond(RSP_DATA, (const void *)start, (uint32_t)n);
            }
            break;
        case C_EXIT:
            unmap_all();
            respond(RSP_OK, NULL, 0);
            break;
        default:
            respond_err(E_BAD_COMMAND);
        }
    }
}
