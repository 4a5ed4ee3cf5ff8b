# processing package
