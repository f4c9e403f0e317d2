"""
The identity query on the wire
==============================

Encode a query, answer it from a host's socket table, then do the same over
a real TCP responder on an ephemeral localhost port.
"""

import threading

from ubfsim import Directory, Host
from ubfsim.ident import (IdentQuery, IdentServer, TcpTransport, decode_query, encode_query,
                          handle_line, query_remote)

d = Directory()
alice = d.create_user("alice")
host = Host("hA", d, address="127.0.0.1")
pid = host.spawn_process(alice.uid, cmdline="curl")
host.bind_socket(pid, "TCP", 40000, "OUTBOUND", ("10.0.0.2", 8888))

q = IdentQuery("TCP", "127.0.0.1", 40000, "10.0.0.2", 8888)
line = encode_query(q)
print("query   ", line)
print("decoded ", decode_query(line))
print("answer  ", handle_line(host, line))
print("garbage ", handle_line(host, b"GET / HTTP/1.0\n"))

# same exchange over TCP
with IdentServer(host, ("127.0.0.1", 0)) as server:
    port = server.server_address[1]
    threading.Thread(target=server.serve_forever, daemon=True).start()
    transport = TcpTransport(resolve=lambda addr: ("127.0.0.1", port))
    print("over tcp", query_remote(transport, "127.0.0.1", q, timeout_ms=500))
    server.shutdown()
