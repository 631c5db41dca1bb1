"""One-tissue compartment modelling, basis-function fitting and flow conversion."""
