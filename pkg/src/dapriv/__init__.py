"""Executable model of a decentralized, patient-controlled medical data
exchange, together with the colluding-observer attack it is designed to
defeat.

Subpackages / modules:

- ``crypto``       signing + sealed-envelope primitives
- ``keypool``      rotating multi-key pools with usage thresholds
- ``eventlog``     the ordered audit log every interaction passes through
- ``coordination`` directory, authorization broker, temp stores
- ``protocol``     entity state and the lab / research / emergency flows
- ``anonymizer``   k-anonymity and entropy diversity gates, generalization
- ``adversary``    shard harvesting, collusion join, linkage metrics
- ``scenario``     config schema and loader
- ``harness``      deterministic simulation driver
- ``report``       summaries, delimited records, figures
- ``cli``          command-line front end
"""

__version__ = "0.1.0"
