"""
Building a routing table
========================

Every token is sent to an expert through a fixed lookup table, so there is
no gate to learn. The table is drawn once from a seeded generator.
"""
import numpy as np

from rremoe.routing import RoutingSpec, build_routing_table, load_histogram

# three domains, two sparse layers, four experts per domain, 30 token IDs
spec = RoutingSpec(num_domains=3, num_rre_layers=2, experts_per_domain=4, vocab_size=30, seed=0)
table = build_routing_table(spec)
print("table shape (domains, layers, vocab):", table.entries.shape)

# domain 1 owns global experts 4..7, and never routes anywhere else
print("domain 1, layer 0, first ten tokens:", table.lookup(1, 0, np.arange(10)))

# 30 tokens over 4 experts: loads differ by at most one
for dom in range(3):
    print(f"domain {dom} layer 0 load:", load_histogram(table, dom, 0))

# the same seed always gives the same table
assert build_routing_table(spec) == table
