"""From-scratch 3D ConvNeXt U-Net, optimizer and training loop."""
