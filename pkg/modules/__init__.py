# HOLD computation modules package
