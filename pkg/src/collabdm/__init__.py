"""Single-round collaborative dataset distillation by distribution matching."""
