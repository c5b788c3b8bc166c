"""Payment-free resource allocation: PF, partial allocation and learned RPF-Net mechanisms."""
