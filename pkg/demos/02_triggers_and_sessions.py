"""A sensor node through two hours of port traffic.

The node wakes on a 5-minute schedule and when the rangefinder sees a ship
cross 30 m. Each wake-up takes a photo; if the server's detector says a ship
is berthing the node records 20 minutes, otherwise 30 seconds.
"""

from portmon import sim
from portmon.ingest import IngestService, LocalServerClient
from portmon.node import Node, NodeConfig
from portmon.telemetry import LoopbackBroker
from portmon.trigger import TriggerConfig

scenario = sim.two_ship_scenario(with_passing=True)
service = IngestService()
broker = LoopbackBroker()
service.attach(broker)
config = NodeConfig("1", trigger=TriggerConfig(schedule_period_s=300.0, distance_threshold_m=30.0))
node = Node(config, sim.PortWorld(scenario), broker, LocalServerClient(service))

for ship in scenario.ship_events:
    kind = "passing" if ship.passing else "berthing"
    print(f"ship ({kind}) appears at t={ship.appear_t:.0f} s, closest {ship.berth_distance_m:.0f} m")

node.run(scenario.duration_s)

print("\ntrigger events:")
for event, decision in node.events:
    if event.kind.value == "Rangefinder" or decision.value == "Suppress":
        print(f"  t={event.t:7.1f}  {event.kind.value:<11} {decision.value}")
print(f"  ... plus {sum(e.kind.value == 'Schedule' for e, _ in node.events)} schedule ticks in total")

print("\nsessions:")
for s in node.sessions:
    if s.ship_detected or s.ship_present:
        print(f"  {s.session_id}  {s.trigger_kind.value:<11} ship seen={s.ship_detected!s:<5} "
              f"berthing={s.ship_present!s:<5} {s.duration_s:6.0f} s {s.row_count:7d} rows")
print(f"  {len(node.sessions)} sessions, {sum(s.ship_present for s in node.sessions)} long")
