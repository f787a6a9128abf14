"""Numerical laboratory for the Monopolist problem on squares."""
