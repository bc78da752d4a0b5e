"""How a transfer changes trip times on a five-stop street.

Nodes 0-4 sit on a straight street, one minute apart. The same five stops
are served first by one route and then by two routes that meet at stop 2,
so any trip crossing stop 2 pays the five-minute transfer penalty.
"""

import numpy as np

from tndp.bench import cmd_validate
from tndp.city import City, NdpParams
from tndp.cost import CostWeights, assign_transit_times, total_cost

n = 5
street = np.full((n, n), np.inf)
for i in range(n - 1):
    street[i, i + 1] = street[i + 1, i] = 60.0
demand = np.ones((n, n)) - np.eye(n)
city = City(np.c_[np.arange(n), np.zeros(n)], street, demand)

for routes in ([(0, 1, 2, 3, 4)], [(0, 1, 2), (2, 3, 4)]):
    params = NdpParams(len(routes), 2, n)
    minutes = assign_transit_times(city, routes).times / 60
    cost = total_cost(city, routes, params, CostWeights(alpha=1.0))
    print(f"routes {routes}: valid={cmd_validate(routes, city, params)['valid']}")
    print(f"  trip 0 -> 4 takes {minutes[0, 4]:.0f} min, 1 -> 3 takes {minutes[1, 3]:.0f} min")
    print(f"  mean trip {cost.passenger / 60:.2f} min, route time {cost.operator / 60:.0f} min\n")
