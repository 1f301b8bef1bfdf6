# HOLD command-line components package
