"""Seeded random scenarios that always run to completion.

Every blocking action used here has a guaranteed waker: files and timers
complete on their own, children always exit, and each client writes its
request before reading the reply from a server that accepts at most as
many connections as it has clients.
"""

from __future__ import annotations

import random

from .scenario import Scenario, parse_scenario

FILES = ["/data/log", "/etc/passwd", "/usr/share/icons/a.png", "/var/cache/index.db",
         "/home/user/notes.txt"]
BINARIES = ["/usr/bin/app", "/usr/lib/libc.so.6"]
FUNCTIONS = ["main", "parse", "render", "hash", "sort"]


class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.n = 0

    def name(self, prefix):
        self.n += 1
        return f"{prefix}{self.n}"

    def plain(self, depth=0) -> list:
        """Actions with no cross-process dependency."""
        r = self.rng
        out = []
        files = []
        for _ in range(r.randint(1, 6)):
            kind = r.choice(["compute", "compute", "read", "mmap", "anon", "poll", "poll0",
                             "sleep", "stat", "fork", "exec"])
            if kind == "compute":
                fn = r.choice(FUNCTIONS)
                caller = r.choice(["", f" from {r.choice(FUNCTIONS)}"])
                out.append(f"compute {r.randint(1, 3000)} fn {fn}{caller}")
            elif kind == "read":
                f = self.name("f")
                out.append(f"open {r.choice(FILES)} as {f}")
                out.append(f"read {f} {r.randint(1, 65536)}")
                if r.random() < 0.5:
                    out.append(f"close {f}")
                else:
                    files.append(f)
            elif kind == "mmap":
                m = self.name("m")
                length = r.randint(1, 8) * 4096
                out.append(f"mmap {r.choice(BINARIES)} {length} as {m}")
                out.append(f"touch {m} {r.randrange(length)}")
            elif kind == "anon":
                m = self.name("a")
                out.append(f"mmap anon 8192 as {m}")
                out.append(f"touch {m} {r.randrange(8192)}")
            elif kind == "poll" and files:
                chosen = r.sample(files, r.randint(1, len(files)))
                timeout = r.choice([0, r.randint(1, 8000)])
                tail = f" timeout {timeout}" if timeout else ""
                out.append(f"poll {' '.join(chosen)}{tail}")
            elif kind == "poll0":
                out.append(f"poll timeout {r.randint(1, 3000)}")
            elif kind == "sleep":
                out.append(f"sleep {r.randint(1, 3000)}")
            elif kind == "stat":
                out.append(f"statlike {r.randint(1, 500)}")
            elif kind == "exec":
                out.append(f"exec {self.name('prog')}")
            elif kind == "fork" and depth < 2:
                k = self.name("k")
                named = r.random() < 0.5
                out.append(f"fork as {k} {{" if named else "fork {")
                out.extend("  " + line for line in self.plain(depth + 1))
                out.append("}")
                if named:
                    out.append(f"waitchild {k}")
                elif r.random() < 0.7:
                    out.append("waitchild")
        return out


def random_scenario_text(seed: int) -> str:
    rng = random.Random(seed)
    g = _Gen(rng)
    lines = ["resources",
             f"  cpus {rng.randint(1, 3)}",
             f"  quantum {rng.choice([500, 1000, 2000, 10000])}",
             f"  file_latency default {rng.randint(100, 6000)}",
             f"  connect_latency {rng.randint(50, 500)}",
             f"  syscall_cost {rng.choice([0, 5, 20])}",
             f"  latency_jitter {rng.choice([0, 0, 300])}",
             ""]
    procs = []
    n_plain = rng.randint(1, 3)
    for i in range(n_plain):
        procs.append((f"p{i}", rng.choice([0, 0, rng.randint(1, 5000)]), g.plain()))
    if rng.random() < 0.6:
        n_clients = rng.randint(1, 3)
        accepts = rng.randint(0, n_clients)
        server = []
        if rng.random() < 0.5:
            server.append(f"compute {rng.randint(1, 1000)} fn init")
        server.append("listen as s")
        for j in range(accepts):
            server += [f"accept s as c{j}", f"readconn c{j} 64",
                       f"servecompute {rng.randint(1, 2000)} fn serve", f"write c{j} 16"]
        procs.append(("srv", rng.choice([0, rng.randint(1, 3000)]), server))
        for j in range(n_clients):
            client = ["connect srv as c", "write c 64", "readconn c 16"]
            client += g.plain(depth=1) if rng.random() < 0.5 else []
            procs.append((f"cl{j}", rng.randint(0, 4000), client))
    for name, delay, actions in procs:
        lines.append(f"process {name}" + (f" delay {delay}" if delay else ""))
        lines.extend("  " + a for a in actions)
        if rng.random() < 0.5:
            lines.append("  exit")
        lines.append("")
    return "\n".join(lines)


def generate_scenario(seed: int) -> Scenario:
    return parse_scenario(random_scenario_text(seed))
