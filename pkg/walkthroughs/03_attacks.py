"""The attacker scenarios: rogue server, rogue client, middleperson.

Run: python3 walkthroughs/03_attacks.py
"""

from opcgate.harness.scenarios import scenario_middleperson, scenario_rogue_client, scenario_rogue_server

runs = [
    ("rogue server", scenario_rogue_server(20)),
    ("rogue server, copied certificate", scenario_rogue_server(20, replay=True)),
    ("rogue client", scenario_rogue_client(20)),
    ("rogue client, copied certificate", scenario_rogue_client(20, replay=True)),
    ("middleperson", scenario_middleperson(20)),
    ("middleperson, copied certificates", scenario_middleperson(20, replay=True)),
    ("passive relay (control)", scenario_middleperson(20, passive=True)),
    ("rogue server trusted (control)", scenario_rogue_server(20, trust_rogue=True)),
]
for label, report in runs:
    print(f"{label:<36} established {report.established:>2}/20  {report.outcomes()}")
