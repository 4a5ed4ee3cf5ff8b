# training package
