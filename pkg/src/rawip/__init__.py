"""Risk-aware Whittle index policies for finite-horizon restless bandits."""
