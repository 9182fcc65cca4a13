"""Split a server's CPU time among the clients it works for.

A server is a process that listened on a socket and accepted at least one
connection.  Before its first accept it is initializing; afterwards every
running microsecond goes to its current client, which changes when it
accepts a connection or reads from a connection it accepted.
"""

from __future__ import annotations

import json

from . import events as ev
from .accounting import ServerProfile
from .replay import ReplayResult, TraceInconsistency


def detect_servers(result: ReplayResult) -> set:
    return {pid for pid, st in result.processes.items() if st.listened and st.accepted_tokens}


def attribute_cpu(result: ReplayResult, attributed, servers=None) -> dict:
    """server pid -> ServerProfile, from the server's running intervals."""
    if servers is None:
        servers = detect_servers(result)
    profiles = {pid: ServerProfile(pid, result.processes[pid].name) for pid in servers}
    since = {}
    accepted = {pid: {} for pid in servers}  # fd -> token of connections the server accepted
    socket_fds = {pid: set() for pid in servers}
    snap = result.snapshot
    if snap is not None:
        for cpu, pid in snap.running.items():
            if pid in profiles:
                since[pid] = snap.start.to_us()

    def charge(pid, now):
        start = since.get(pid)
        if start is not None:
            profiles[pid].add(profiles[pid].current_client, now - start)
            since[pid] = now

    for ae in attributed:
        k, now = ae.kind, ae.ts.to_us()
        if isinstance(k, ev.SchedChange):
            if k.out_pid in profiles:
                charge(k.out_pid, now)
                since.pop(k.out_pid, None)
            if k.in_pid in profiles:
                since[k.in_pid] = now
            continue
        pid = ae.pid
        if pid not in profiles:
            continue
        if isinstance(k, ev.SockAccept):
            conn = result.connections.get(k.conn_token)
            if conn is None:
                raise TraceInconsistency(f"accept of unknown connection {k.conn_token}", ae.ts)
            charge(pid, now)
            profiles[pid].current_client = conn.client_pid
            accepted[pid][k.new_fd] = k.conn_token
            socket_fds[pid].add(k.new_fd)
        elif isinstance(k, ev.SockConnect):
            socket_fds[pid].add(k.fd)
        elif isinstance(k, ev.FsClose):
            accepted[pid].pop(k.fd, None)
            socket_fds[pid].discard(k.fd)
        elif isinstance(k, ev.FsOpen):
            socket_fds[pid].discard(k.fd)
        elif isinstance(k, ev.FsRead) and k.fd in socket_fds[pid]:
            token = accepted[pid].get(k.fd)
            if token is None:
                continue  # reading a connection this process opened as a client
            conn = result.connections.get(token)
            if conn is None:
                raise TraceInconsistency(f"read on fd {k.fd} with no registered connection", ae.ts)
            charge(pid, now)
            profiles[pid].current_client = conn.client_pid
    end = result.end.to_us()
    for pid in list(since):
        charge(pid, end)
    return profiles


def render_clients(profiles: dict) -> str:
    out = []
    for pid in sorted(profiles):
        p = profiles[pid]
        out.append(f"Server {p.server_pid} {p.name}")
        out.append(f"Init {p.init_cpu_us / 1e6:.6f}")
        for client, us in sorted(p.per_client_cpu_us.items(), key=lambda kv: (-kv[1], kv[0])):
            if us:
                out.append(f"Client-{client} {us / 1e6:.6f}")
        out.append("")
    return "\n".join(out)


def clients_json(profiles: dict) -> str:
    return json.dumps({"servers": [profiles[p].to_json() for p in sorted(profiles)]},
                      indent=2, sort_keys=True) + "\n"
