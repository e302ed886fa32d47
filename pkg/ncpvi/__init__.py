"""Non-centered mean-field variational inference for hierarchical linear inverse problems."""
