"""HF sensor-network protocol: codec, analysis, channel, MAC, emergency mode, simulation."""
