"""
Opting a listener in with newgrp
================================

Two hosts, two users. bob's connection to alice's port is refused until
alice's server switches its primary group to a project bob belongs to.
"""

from ubfsim import bundled_scenario, check_isolation, run

scenario = bundled_scenario("newgrp_optin")
trace = run(scenario, seed=0)

# every new connection leaves one verdict record; data packets ride the flow table
for r in trace.of_type("verdict"):
    src = "{}:{}".format(*r["event"]["src"])
    print(f"t={r['t']:>3}ms  uid {r['src_uid']} from {src} -> uid {r['dst_uid']} "
          f"(egid {r['dst_egid']}): {r['verdict']} {r['reason']}")

print()
print(check_isolation(scenario, trace).to_text())
