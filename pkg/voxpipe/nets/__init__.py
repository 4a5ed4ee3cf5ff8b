# nets package
