"""Text model, ViT encoder, bridge, visual adapter and the composed PIPModel."""
