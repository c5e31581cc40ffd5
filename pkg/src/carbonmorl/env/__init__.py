from .network import (Action, ActionSpace, EnvState, Exogenous, Network, NetworkEnv,
                      PacketTracker, Slot, TRAJECTORY_COLUMNS, sample_exogenous, transition,
                      write_trajectory)

__all__ = ["Action", "ActionSpace", "EnvState", "Exogenous", "Network", "NetworkEnv",
           "PacketTracker", "Slot", "TRAJECTORY_COLUMNS", "sample_exogenous", "transition",
           "write_trajectory"]
