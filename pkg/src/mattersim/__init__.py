"""Matter-style smart-home protocol stack over a deterministic network simulator."""

from . import datamodel, encap, interaction, msglayer, netsim, perfmodel, scenario, schc

__version__ = "0.1.0"

__all__ = ["datamodel", "encap", "interaction", "msglayer", "netsim", "perfmodel", "scenario", "schc"]
