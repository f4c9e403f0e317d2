"""
Switching mechanisms off
========================

The adversarial fixture probes every channel between two users. With all
toggles on it is clean; each toggle turned off opens at least one channel.
"""

from ubfsim import bundled_scenario, check_isolation, run
from ubfsim.scenario import TOGGLES

base = bundled_scenario("adversarial")
rep = check_isolation(base, run(base))
print(f"{'all on':<14} violations={len(rep.violations)}  "
      f"residual={[r['kind'] for r in rep.residual_channels]}")

for toggle in TOGGLES:
    s = base.with_toggles(**{toggle: False})
    rep = check_isolation(s, run(s))
    kinds = sorted({v.kind for v in rep.violations})
    print(f"{toggle + ' off':<14} violations={len(rep.violations)}  {kinds}")
