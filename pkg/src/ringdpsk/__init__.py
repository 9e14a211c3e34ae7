"""PLL-free ring-oscillator multi-DPSK transmitter simulator."""
