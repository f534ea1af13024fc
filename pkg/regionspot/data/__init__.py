# Data Package
