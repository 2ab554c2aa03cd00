"""Multi-arm torque control at 1 kHz: switchable controllers, simulated
plants, fidelity metrics, and inertial parameter identification."""

__version__ = "0.1.0"
