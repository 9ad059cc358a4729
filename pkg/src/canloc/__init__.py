"""Voltage-fingerprint security monitoring for a simulated CAN bus.

Subpackages/modules:
  frames        CAN 2.0A bit encoding, CRC-15, bit stuffing, field masks
  bus           tapped-bus waveform synthesis and the Nw0..Nw8 topologies
  features      edge-window feature extraction and normalization
  nn            minimal float64 neural engine (layers, losses, optimizers)
  detector      autoencoder topology-change detection
  localizer     augmentation, 1-D VGG16 classifier, majority-vote location
  authenticator per-ECU binary CNNs, 0.5 accept rule, origin identification
  monitoring    start-up state machine and the continuous frame loop
  tracefile     binary trace container
  metrics       FRR/FAR and confusion-matrix reports
  cli           gen / train / eval / run commands
"""

__version__ = "0.1.0"
