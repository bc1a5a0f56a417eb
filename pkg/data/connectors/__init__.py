# Data connectors package
