"""Model-invariant state abstractions for factored MDPs."""
